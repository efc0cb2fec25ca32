"""
Packaging for dqos-lab.

    python -m pip install .                 # runtime only
    python -m pip install -e ".[dev]"       # editable, with test and lint tools
    python -m build                         # wheel + sdist
"""

import sys
import warnings
from pathlib import Path

from setuptools import find_packages, setup

HERE = Path(__file__).resolve().parent
PACKAGE = "dqos_lab"
CORE_DEPENDENCIES = frozenset({"numpy", "pandas", "openpyxl"})


# ---- Requirements ---- #
def read_requirements(name: str) -> list[str]:
    """
    Requirement lines of ``dqos_lab/<name>``.

    Comments, blank lines and ``-r`` includes are dropped, so the dev file
    only contributes what it adds on top of the runtime pins.
    """
    path = HERE / PACKAGE / name
    if not path.is_file():
        warnings.warn(f"{path} is missing; no requirements taken from it")
        return []
    lines = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split(" #", 1)[0].strip()
        if line and not line.startswith(("#", "-r")):
            lines.append(line)
    return lines


def distribution_name(requirement: str) -> str:
    for sep in ("==", ">=", "<=", "~=", ">", "<", "["):
        requirement = requirement.split(sep, 1)[0]
    return requirement.strip().lower()


install_requires = read_requirements("requirements.txt")
missing = CORE_DEPENDENCIES - {distribution_name(r) for r in install_requires}
if missing:
    warnings.warn(f"requirements.txt does not pin {', '.join(sorted(missing))}")

readme = HERE / "README.md"
long_description = readme.read_text(encoding="utf-8") if readme.is_file() else ""


if __name__ == "__main__":
    if len(sys.argv) == 1:
        print("Nothing to do. Try: python -m pip install -e \".[dev]\"")
        sys.exit(0)
    setup(
        name="dqos-lab",
        version="0.1.0",
        description="Discrete-event SDN simulator, drop-rate predictor and stealthy flow-table attack experiments.",
        long_description=long_description,
        long_description_content_type="text/markdown",
        author="DQoS lab contributors",
        license="MIT",
        python_requires=">=3.10",
        packages=find_packages(include=[PACKAGE, f"{PACKAGE}.*"]),
        package_data={PACKAGE: ["config.json"]},
        install_requires=install_requires,
        extras_require={"dev": read_requirements("requirements-dev.txt")},
        entry_points={"console_scripts": [f"dqos-lab={PACKAGE}.dqos_cli:main"]},
        classifiers=[
            "Development Status :: 3 - Alpha",
            "Intended Audience :: Science/Research",
            "Programming Language :: Python :: 3",
            "Topic :: Scientific/Engineering",
            "Topic :: System :: Networking",
        ],
        keywords="sdn openflow flow-table simulation denial-of-service neural-network",
    )
