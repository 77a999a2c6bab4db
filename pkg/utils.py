"""
Export helpers for result tables and run manifests.
"""

import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from config import __version__

MANIFEST_NAME = "manifest.json"
CSV_FLOAT_FORMAT = "%.12g"


def convert_df_to_csv(df: pd.DataFrame) -> bytes:
    """Convert DataFrame to CSV bytes."""
    return df.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n").encode("utf-8")


def convert_df_to_excel(sheets) -> bytes:
    """One DataFrame or a {sheet name: DataFrame} mapping to Excel bytes."""
    if isinstance(sheets, pd.DataFrame):
        sheets = {"Sheet1": sheets}
    buffer = io.BytesIO()
    with pd.ExcelWriter(buffer, engine="xlsxwriter") as writer:
        for name, df in sheets.items():
            df.to_excel(writer, index=False, sheet_name=name[:31])
    return buffer.getvalue()


def convert_df_to_pdf(df: pd.DataFrame, title="Table Export", notes=()) -> bytes:
    """Render a DataFrame as a landscape PDF table, with optional note paragraphs."""
    buffer = io.BytesIO()

    doc = SimpleDocTemplate(buffer, pagesize=landscape(A4))
    style = getSampleStyleSheet()
    elements = [Paragraph(title, style["Heading1"])]
    for note in notes:
        elements.append(Paragraph(note, style["Normal"]))
    elements.append(Spacer(1, 8))

    data = [df.columns.tolist()] + df.astype(str).values.tolist()
    table = Table(data, repeatRows=1)
    table.setStyle(TableStyle([
        ("BACKGROUND", (0, 0), (-1, 0), colors.grey),
        ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
        ("ALIGN", (0, 0), (-1, -1), "CENTER"),
        ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
        ("BOTTOMPADDING", (0, 0), (-1, 0), 8),
        ("BACKGROUND", (0, 1), (-1, -1), colors.beige),
        ("GRID", (0, 0), (-1, -1), 0.25, colors.black),
    ]))
    elements.append(table)
    doc.build(elements)

    pdf = buffer.getvalue()
    buffer.close()
    return pdf


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def write_json(path, data):
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def write_manifest(out_dir, subcommand, config_path, seed, resolved_config, argv=None):
    """RunManifest: enough to reproduce the artifacts in `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config_path": str(config_path) if config_path else None,
        "seed": seed,
        "output_dir": str(out_dir),
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": resolved_config,
    }
    return write_json(out_dir / MANIFEST_NAME, manifest)
