"""
Report manager for condot runs.
Loads Jinja2 templates and renders the report.md of each experiment command.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).resolve().parent / "templates"


def _fmt(value: Any, digits: int = 6) -> str:
    """Compact number formatting for report tables."""
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, (int, float)):
        return f"{value:.{digits}g}"
    return str(value)


class ReportManager:
    """Manages the Markdown report templates of the experiment commands."""

    def __init__(self, templates_dir: Union[str, Path] = TEMPLATES_DIR):
        """Initialize the report manager.

        Args:
            templates_dir: Directory containing Jinja2 template files
        """
        self.templates_dir = Path(templates_dir)
        self.env = Environment(
            loader=FileSystemLoader(str(self.templates_dir)),
            trim_blocks=True,
            lstrip_blocks=True,
        )
        self.env.filters["fmt"] = _fmt

        # Cache for loaded templates
        self._template_cache = {}

        logger.debug(f"ReportManager initialized with templates from: {self.templates_dir}")

    def load_template(self, template_name: str):
        """Load a Jinja2 template.

        Args:
            template_name: Name of the template file (without .j2 extension)
        """
        if template_name not in self._template_cache:
            try:
                template_path = f"{template_name}.j2"
                self._template_cache[template_name] = self.env.get_template(template_path)
                logger.debug(f"Loaded template: {template_path}")
            except Exception as e:
                logger.error(f"Failed to load template {template_name}: {e}")
                raise

        return self._template_cache[template_name]

    def render_report(self, command: str, config: Dict[str, Any], summary: Dict[str, Any],
                      metrics: Optional[pd.DataFrame] = None, outputs: Optional[List[str]] = None,
                      max_rows: int = 50) -> str:
        """Render the report of one command run.

        Commands without a dedicated template fall back to the generic run report.
        """
        name = command.replace("-", "_")
        template_name = name if name in self.get_available_templates() else "run_report"
        rows: List[Dict[str, Any]] = []
        columns: List[str] = []
        if metrics is not None and not metrics.empty:
            columns = list(metrics.columns)
            rows = metrics.head(max_rows).to_dict(orient="records")
        context = {
            "command": command,
            "config": config,
            "summary": summary,
            "columns": columns,
            "rows": rows,
            "truncated": metrics is not None and len(metrics) > max_rows,
            "outputs": outputs or [],
        }
        return self.load_template(f"{template_name}.md").render(**context)

    def write_report(self, path: Union[str, Path], command: str, config: Dict[str, Any],
                     summary: Dict[str, Any], metrics: Optional[pd.DataFrame] = None,
                     outputs: Optional[List[str]] = None) -> Path:
        path = Path(path)
        path.write_text(self.render_report(command, config, summary, metrics, outputs))
        logger.info(f"Report written to {path}")
        return path

    def get_available_templates(self) -> List[str]:
        """Template names (without .j2) found in the templates directory."""
        return sorted(
            f.name[:-len(".md.j2")] for f in self.templates_dir.glob("*.md.j2") if not f.name.startswith("_")
        )

    def reload_templates(self):
        self._template_cache.clear()
        logger.info("Report template cache cleared")
