"""
Gradio App - Hierarchical Geolocalization Dashboard

Inspect the class-count inequality of a dataset manifest and evaluate a
trained checkpoint on one.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import gradio as gr

from evaluation.evaluate import dataset_statistics, evaluate, evaluate_all_modes
from geoloc.config import env_path
from geoloc.data import read_manifest
from geoloc.errors import HierGeoError
from geoloc.inequality import lorenz_csv
from geoloc.inference import EVAL_MODES
from geoloc.taxonomy import load_taxonomy

logger = logging.getLogger(__name__)

TITLE = "Hierarchical Video Geolocalization"

DESCRIPTION = """
Four-level geolocalization (city, state/province, country, continent) of videos
from pre-extracted encoder features.

- **Inequality** - per-hierarchy class counts, Gini and Hoover indices and the Lorenz curve of a manifest
- **Evaluation** - top-1 / top-5 accuracy of a checkpoint with or without hierarchical refinement
"""


def _path(upload) -> Optional[Path]:
    if upload is None:
        return None
    return Path(upload if isinstance(upload, str) else upload.name)


def analyze_manifest(manifest) -> tuple[str, str, str]:
    """Statistics table, Lorenz CSV of the city level, and the raw JSON."""
    path = _path(manifest)
    if path is None:
        return "Please upload a manifest.", "", ""
    try:
        records, taxonomy = read_manifest(path)
        stats = dataset_statistics(records, taxonomy, name=path.stem)
    except (HierGeoError, OSError) as e:
        return f"Error: {e}", "", ""
    return (
        stats.summary_str(),
        lorenz_csv(stats.level("city").lorenz),
        json.dumps(stats.to_dict(include_lorenz=False), indent=2),
    )


def evaluate_checkpoint(checkpoint, manifest, taxonomy_file, mode: str) -> tuple[str, str]:
    """Printed summary and JSON report for ``mode`` (or every mode)."""
    checkpoint_path = _path(checkpoint) or env_path("HIERGEO_CHECKPOINT")
    manifest_path = _path(manifest)
    taxonomy_path = _path(taxonomy_file) or env_path("HIERGEO_TAXONOMY")
    if checkpoint_path is None or manifest_path is None:
        return "Please provide a checkpoint and a manifest.", ""
    try:
        taxonomy = load_taxonomy(taxonomy_path) if taxonomy_path else None
        records, taxonomy = read_manifest(manifest_path, taxonomy)
        if mode == "all":
            reports = evaluate_all_modes(checkpoint_path, records, taxonomy)
            summary = "\n\n".join(r.summary_str() for r in reports.values())
            payload = {m: r.to_dict() for m, r in reports.items()}
        else:
            report = evaluate(checkpoint_path, records, taxonomy, mode)
            summary, payload = report.summary_str(), report.to_dict()
    except (HierGeoError, OSError) as e:
        return f"Error: {e}", ""
    return summary, json.dumps(payload, indent=2)


demo = gr.Blocks(title=TITLE)

with demo:
    gr.Markdown(f"# {TITLE}")
    gr.Markdown(DESCRIPTION)

    with gr.Tab("Inequality"):
        manifest_input = gr.File(label="Manifest (JSON lines)")
        analyze_btn = gr.Button("Analyze", variant="primary")
        stats_text = gr.Textbox(label="Statistics", lines=8, interactive=False)
        lorenz_text = gr.Textbox(label="City Lorenz curve (CSV)", lines=8, interactive=False)
        stats_json = gr.Code(label="JSON", language="json")
        analyze_btn.click(
            fn=analyze_manifest,
            inputs=[manifest_input],
            outputs=[stats_text, lorenz_text, stats_json],
        )

    with gr.Tab("Evaluation"):
        checkpoint_input = gr.File(label="Checkpoint (.cgck)")
        eval_manifest_input = gr.File(label="Manifest (JSON lines)")
        taxonomy_input = gr.File(label="Taxonomy (.tsv, optional)")
        mode_input = gr.Radio(list(EVAL_MODES) + ["all"], value="codependent", label="Evaluation mode")
        eval_btn = gr.Button("Evaluate", variant="primary")
        eval_text = gr.Textbox(label="Report", lines=12, interactive=False)
        eval_json = gr.Code(label="JSON", language="json")
        eval_btn.click(
            fn=evaluate_checkpoint,
            inputs=[checkpoint_input, eval_manifest_input, taxonomy_input, mode_input],
            outputs=[eval_text, eval_json],
        )

if __name__ == "__main__":
    demo.launch()
