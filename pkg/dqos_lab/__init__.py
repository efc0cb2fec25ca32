# This file makes the 'dqos_lab' directory a Python package.
