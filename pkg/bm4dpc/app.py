"""
Main application file for BM4D-PC
"""
import sys

from bm4dpc.ui.cli import run_cli


def main():
    """
    Main entry point for the application
    """
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
