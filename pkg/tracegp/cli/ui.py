import logging
from typing import Any, Dict, List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.style import Style
from rich.table import Table

# Create console instance
console = Console()

# Styles
SUCCESS_STYLE = Style(color="green", bold=True)
ERROR_STYLE = Style(color="red", bold=True)
WARNING_STYLE = Style(color="yellow", bold=True)
INFO_STYLE = Style(color="blue", bold=True)
TITLE_STYLE = Style(color="cyan", bold=True)

_HEADERS = {"alpha": "α", "lam": "λ", "auc": "AUC", "map100": "MAP@100", "p100": "P@100", "r100": "R@100"}


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}" if abs(value) >= 1e-3 or value == 0 else f"{value:.3e}"
    return str(value)


class UI:
    @staticmethod
    def setup_logging(verbose: bool = False) -> None:
        """Route the package loggers through rich"""
        logger = logging.getLogger('tracegp')
        logger.handlers.clear()
        logger.addHandler(RichHandler(console=console, show_path=False, markup=False))
        logger.setLevel(logging.DEBUG if verbose else logging.INFO)
        logger.propagate = False

    @staticmethod
    def print_success(message: str) -> None:
        """Print success message"""
        console.print(f"✅ {message}", style=SUCCESS_STYLE)

    @staticmethod
    def print_error(message: str) -> None:
        """Print error message"""
        console.print(f"❌ {message}", style=ERROR_STYLE)

    @staticmethod
    def print_warning(message: str) -> None:
        """Print warning message"""
        console.print(f"⚠️ {message}", style=WARNING_STYLE)

    @staticmethod
    def print_info(message: str) -> None:
        """Print info message"""
        console.print(f"ℹ️ {message}", style=INFO_STYLE)

    @staticmethod
    def display_spectrum(summary: Dict[str, Any], title: str = "Kernel Spectrum") -> None:
        table = Table(title=title, show_header=True, header_style=TITLE_STYLE)
        table.add_column("Property", style="cyan")
        table.add_column("Value", style="green", justify="right")
        for key in ('dim', 'rank', 'min_eigenvalue', 'max_eigenvalue', 'trace'):
            table.add_row(key.replace('_', ' ').title(), _fmt(summary[key]))
        console.print(table)

    @staticmethod
    def display_metrics(rows: List[Dict[str, Any]], title: str = "Ranking Metrics") -> None:
        """One row per grid point (or fold): α, s, λ and the headline metrics"""
        if not rows:
            UI.print_info("No results to display")
            return
        columns = [c for c in ('fold', 'alpha', 's', 'lam', 'n_models', 'auc', 'map100', 'p100', 'r100')
                   if any(c in row for row in rows)]
        table = Table(title=title, show_header=True, header_style=TITLE_STYLE)
        for column in columns:
            table.add_column(_HEADERS.get(column, column), justify="right")
        for row in rows:
            table.add_row(*[_fmt(row.get(c, '')) for c in columns])
        console.print(table)

    @staticmethod
    def display_aggregate(aggregate: Dict[str, Dict[str, float]], selected: Optional[Dict] = None) -> None:
        """Mean (std) per metric, the layout of a results table"""
        table = Table(title="Cross-validation", show_header=True, header_style=TITLE_STYLE)
        for name in aggregate:
            table.add_column(_HEADERS.get(name, name), justify="right", style="green")
        table.add_row(*[f"{v['mean']:.4f} ({v['std']:.4f})" for v in aggregate.values()])
        console.print(table)
        if selected:
            console.print(f"[bold cyan]Selected:[/] alpha={selected['alpha']:g}, "
                          f"lambda={selected['lam']:.4e} (s={selected['s']:.4g})")

    @staticmethod
    def display_config(config: Dict[str, Any]) -> None:
        """Display configuration in a rich panel"""
        config_table = Table(show_header=False, show_edge=False)
        config_table.add_column("Key", style="cyan")
        config_table.add_column("Value", style="green")
        for key in sorted(config):
            value = config[key]
            config_table.add_row(key, 'Not set' if value is None else str(value))

        panel = Panel(
            config_table,
            title="[bold cyan]Experiment Configuration",
            border_style="blue"
        )
        console.print(panel)

    @staticmethod
    def progress_context(message: str):
        """Create a progress context for long-running operations"""
        return Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        )

    @staticmethod
    def print_help() -> None:
        """Display help information in a styled panel"""
        help_table = Table(show_header=False, show_edge=False)
        help_table.add_column("Command", style="cyan")
        help_table.add_column("Description", style="green")

        # Commands
        help_table.add_row("[bold]Commands:", "")
        help_table.add_row("kernel", "Build the exponential graph kernel and its basis")
        help_table.add_row("train", "Train ranking models over negative sets and the (alpha, s) grid")
        help_table.add_row("evaluate", "Score test labels with a model manifest or a score matrix")
        help_table.add_row("cv", "Cross-validate the grid and select (alpha, lambda) by MAP@100")
        help_table.add_row("synth", "Generate a synthetic dataset from the GP prior")
        help_table.add_row("cfg", "Show the resolved configuration")

        # Options
        help_table.add_row("", "")
        help_table.add_row("[bold]Options:", "")
        help_table.add_row("-c, --config", "Experiment config (JSON)")
        help_table.add_row("-o, --out", "Output directory")
        help_table.add_row("--graph, --col-graph", "Row / column graph files")
        help_table.add_row("--labels, --test-labels", "Training / test label files")
        help_table.add_row("--manifest", "Model manifest (evaluate)")
        help_table.add_row("--scores", "Dense score matrix used instead of models (evaluate)")
        help_table.add_row("--seed", "Random seed (or TRACEGP_SEED)")
        help_table.add_row("--add-identity", "Use exp(-L) + I as the kernel")
        help_table.add_row("--mode", "Split mode for cv: entrywise or rowwise")
        help_table.add_row("--pool", "Candidate pool: labeled or all")
        help_table.add_row("--negative-sets", "Number of sampled negative sets (0 uses labels as given)")
        help_table.add_row("--verbose", "Debug logging")
        help_table.add_row("-v, --version", "Show version")

        # Examples
        help_table.add_row("", "")
        help_table.add_row("[bold]Examples:", "")
        help_table.add_row("tgp kernel --graph ppi.tsv -o kern", "Write kern/kernel.krnl and kern/basis.krnl")
        help_table.add_row("tgp synth -c exp.json --seed 7 -o data", "Generate a synthetic dataset")
        help_table.add_row("tgp train -c exp.json -o run", "Train and write run/manifest.json")
        help_table.add_row("tgp evaluate -c exp.json --manifest run/manifest.json --test-labels t.tsv",
                           "Write metrics.json and curves.tsv")
        help_table.add_row("tgp cv -c exp.json --mode rowwise", "Row-wise five-fold cross-validation")

        panel = Panel(
            help_table,
            title="[bold cyan]tgp - Trace-norm MV-GP ranking",
            border_style="blue"
        )
        console.print(panel)
