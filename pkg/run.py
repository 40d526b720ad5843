"""
Development runner for the fedcon CLI, usable without installing the package.
"""

from app.main import main

if __name__ == "__main__":
    main()
