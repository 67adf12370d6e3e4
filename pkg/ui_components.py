#!/usr/bin/env python3
"""
UI Components for the LSTR detector
Console messages, tables and progress bars with Rich formatting
"""

try:
    from rich.console import Console
    from rich.progress import (
        BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn,
    )
    from rich.panel import Panel
    from rich.table import Table
    from rich import box
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False


class Icons:
    """Flat single-glyph icons"""

    @staticmethod
    def get(name):
        icon_map = {
            # status
            'success': '✓', 'error': '✗', 'warning': '⚠', 'info': 'ℹ', 'tip': '→',
            # pipeline stages
            'data': '▤', 'train': '⚙', 'detect': '◎', 'eval': '★', 'graph': '◈',
            'attention': '◉', 'folder': '▸', 'config': '▭',
            # progress
            'loading': '⟳', 'processing': '⚙', 'completed': '✓', 'failed': '✗',
        }
        return icon_map.get(name, '•')


class Messages:
    """Centralized message templates with Rich formatting"""

    @staticmethod
    def success(text):
        return f"[bold green]{Icons.get('success')} {text}[/bold green]"

    @staticmethod
    def error(text):
        return f"[bold red]{Icons.get('error')} {text}[/bold red]"

    @staticmethod
    def warning(text):
        return f"[bold yellow]{Icons.get('warning')} {text}[/bold yellow]"

    @staticmethod
    def info(text):
        return f"[cyan]{Icons.get('info')} {text}[/cyan]"


class ModernUI:
    """Console front-end shared by every command"""

    def __init__(self, console=None):
        if console is not None:
            self.console = console
        else:
            self.console = Console() if RICH_AVAILABLE else None

    def print(self, markup):
        if self.console:
            self.console.print(markup)
        else:
            print(markup)

    def show_banner(self, command, out_dir):
        """One-panel header naming the command and output directory"""
        if not self.console:
            print(f"\nlstr {command} -> {out_dir}")
            print("=" * 70)
            return
        panel = Panel(
            f"[bold white]{command}[/bold white]  [dim]output:[/dim] {out_dir}",
            title="[bold cyan]LSTR action detector[/bold cyan]",
            border_style="bright_cyan",
            box=box.ROUNDED,
            padding=(0, 2),
        )
        self.console.print(panel)

    def error_message(self, message):
        self.print(Messages.error(message))

    def show_key_values(self, title, rows):
        """Two-column table of (key, value[, note]) rows"""
        if not self.console:
            print(title)
            for row in rows:
                print("  " + "  ".join(str(v) for v in row))
            return
        table = Table(title=title, box=box.SIMPLE_HEAVY, show_header=True, header_style="bold cyan")
        width = max((len(r) for r in rows), default=2)
        for name in ("key", "value", "provenance")[:width]:
            table.add_column(name)
        for row in rows:
            table.add_row(*(str(v) for v in row))
        self.console.print(table)

    def show_ap_table(self, title, per_class, mean):
        """Per-class average precision followed by the mean"""
        rows = [(f"class {k}", f"{v:.4f}") for k, v in sorted(per_class.items())]
        rows.append(("mean", f"{mean:.4f}"))
        if not self.console:
            print(title)
            for name, value in rows:
                print(f"  {name:<10} {value}")
            return
        table = Table(title=title, box=box.SIMPLE_HEAVY, header_style="bold cyan")
        table.add_column("class")
        table.add_column("AP", justify="right")
        for name, value in rows:
            style = "bold green" if name == "mean" else None
            table.add_row(name, value, style=style)
        self.console.print(table)

    def create_training_progress(self):
        """Progress bar for epoch/video loops; None without Rich"""
        if RICH_AVAILABLE:
            return Progress(
                SpinnerColumn(spinner_name="dots"),
                TextColumn("[bold blue]{task.description}"),
                BarColumn(bar_width=40, style="cyan", complete_style="green"),
                MofNCompleteColumn(),
                TextColumn("{task.fields[status]}"),
                TimeElapsedColumn(),
                console=self.console,
                transient=False,
            )
        return None
