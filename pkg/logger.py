#!/usr/bin/env python3
"""
Run logging for the LSTR detector
Routes messages through the shared console templates and counts problems
"""

from ui_components import Messages, ModernUI


class RunLogger:
    """Command logger with warning/error counters and a closing summary"""

    def __init__(self, ui=None, verbose=False, quiet=False):
        self.ui = ui or ModernUI()
        self.verbose = verbose
        self.quiet = quiet
        self.warning_count = 0
        self.error_count = 0

    def debug(self, msg):
        """Shown only in verbose mode"""
        if self.verbose:
            self.ui.print(f"[dim]{msg}[/dim]")

    def info(self, msg):
        if not self.quiet:
            self.ui.print(Messages.info(msg))

    def success(self, msg):
        if not self.quiet:
            self.ui.print(Messages.success(msg))

    def warning(self, msg):
        """Counted always, printed unless quiet"""
        self.warning_count += 1
        if not self.quiet:
            self.ui.print(Messages.warning(msg))

    def error(self, msg):
        self.error_count += 1
        self.ui.print(Messages.error(msg))

    def print_summary(self):
        """Print summary of warnings and errors if any occurred"""
        if self.warning_count > 0:
            self.ui.print(f"[dim yellow]⚠ {self.warning_count} warning(s) occurred during the run[/dim yellow]")
        if self.error_count > 0:
            self.ui.print(f"[dim red]✗ {self.error_count} error(s) occurred during the run[/dim red]")
