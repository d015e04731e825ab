# This file makes the 'tests' directory a Python package.
# Add test-specific imports or configurations here if needed.
