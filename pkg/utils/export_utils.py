import hashlib
import io
import json
import os
from typing import Dict, Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from reportlab.lib import colors  # noqa: E402
from reportlab.lib.pagesizes import letter  # noqa: E402
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet  # noqa: E402
from reportlab.lib.units import inch  # noqa: E402
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle  # noqa: E402

from utils.errors import ExportError  # noqa: E402
from utils.retrieval_eval import RetrievalReport  # noqa: E402

RUN_MANIFEST = "run_manifest.json"


def report_pivot(report: RetrievalReport) -> pd.DataFrame:
    """Recall table with one row per task and one ``R@K`` column per cut-off."""
    frame = report.to_frame()
    if frame.empty:
        raise ExportError("No retrieval rows to export")
    pivot = frame.pivot(index="task", columns="k", values="recall")
    pivot.columns = [f"R@{k}" for k in pivot.columns]
    order = [t for t in dict.fromkeys(frame["task"]) if t != "average"]
    if "average" in pivot.index:
        order.append("average")
    return pivot.loc[order]


def export_to_json(report: RetrievalReport, run_id: Optional[str] = None):
    """
    Export a retrieval report to JSON.

    Args:
        report: RetrievalReport
        run_id: Optional run id for the filename

    Returns:
        tuple: (json_string, filename)
    """
    try:
        json_string = json.dumps(report.to_dict(), indent=2, sort_keys=True, default=str)
        return json_string, f"retrieval_{run_id or 'report'}.json"
    except (TypeError, ValueError) as e:
        raise ExportError(f"JSON export failed: {e}") from e


def export_to_csv(report: RetrievalReport, run_id: Optional[str] = None):
    """
    Export retrieval rows (task, k, recall, queries) to CSV.

    Returns:
        tuple: (csv_string, filename)
    """
    frame = report.to_frame()
    if frame.empty:
        raise ExportError("No retrieval rows to export")
    try:
        return frame.to_csv(index=False), f"retrieval_{run_id or 'report'}.csv"
    except (TypeError, ValueError) as e:
        raise ExportError(f"CSV export failed: {e}") from e


def export_to_excel(report: RetrievalReport, run_id: Optional[str] = None):
    """
    Export a retrieval report to Excel with a recall sheet, a long-form sheet
    and a run-info sheet.

    Returns:
        tuple: (excel_bytes, filename)
    """
    pivot = report_pivot(report)
    try:
        output = io.BytesIO()
        with pd.ExcelWriter(output, engine="openpyxl") as writer:
            pivot.reset_index().to_excel(writer, sheet_name="Recall", index=False)
            report.to_frame().to_excel(writer, sheet_name="Rows", index=False)
            if report.metadata:
                meta = pd.DataFrame([{"Field": k, "Value": str(v)} for k, v in sorted(report.metadata.items())])
                meta.to_excel(writer, sheet_name="Run Info", index=False)
        return output.getvalue(), f"retrieval_{run_id or 'report'}.xlsx"
    except (OSError, ValueError) as e:
        raise ExportError(f"Excel export failed: {e}") from e


def export_frame_pdf(frame: pd.DataFrame, metadata: Optional[Dict] = None, title: str = "Retrieval Report"):
    """
    Render a metadata table and a results table to a PDF.

    Returns:
        bytes: PDF document (reportlab invariant mode, no embedded dates)
    """
    if frame.empty:
        raise ExportError("No rows to export")
    try:
        buffer = io.BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=letter, topMargin=1 * inch, invariant=1)
        styles = getSampleStyleSheet()
        title_style = ParagraphStyle("ReportTitle", parent=styles["Heading1"], fontSize=18,
                                     textColor=colors.darkblue, spaceAfter=30)
        heading_style = ParagraphStyle("ReportHeading", parent=styles["Heading2"], fontSize=14,
                                       textColor=colors.darkblue, spaceAfter=12)

        content = [Paragraph(title, title_style)]
        if metadata:
            content.append(Paragraph("Run Information", heading_style))
            rows = [[str(k).replace("_", " ").title(), str(v)] for k, v in sorted(metadata.items())]
            meta_table = Table(rows, colWidths=[2 * inch, 4.5 * inch])
            meta_table.setStyle(TableStyle([
                ("BACKGROUND", (0, 0), (0, -1), colors.lightgrey),
                ("FONTNAME", (0, 0), (0, -1), "Helvetica-Bold"),
                ("FONTSIZE", (0, 0), (-1, -1), 8),
                ("GRID", (0, 0), (-1, -1), 1, colors.black),
                ("VALIGN", (0, 0), (-1, -1), "TOP"),
            ]))
            content.extend([meta_table, Spacer(1, 20)])

        content.append(Paragraph("Results", heading_style))
        header = [str(c) for c in frame.columns]
        body = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row]
                for row in frame.itertuples(index=False)]
        table = Table([header] + body)
        table.setStyle(TableStyle([
            ("BACKGROUND", (0, 0), (-1, 0), colors.lightblue),
            ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("ALIGN", (0, 0), (-1, -1), "LEFT"),
            ("FONTSIZE", (0, 0), (-1, -1), 9),
            ("BACKGROUND", (0, 1), (-1, -1), colors.beige),
            ("GRID", (0, 0), (-1, -1), 1, colors.black),
        ]))
        content.append(table)
        doc.build(content)
        pdf_bytes = buffer.getvalue()
        buffer.close()
        return pdf_bytes
    except (OSError, ValueError) as e:
        raise ExportError(f"PDF export failed: {e}") from e


def export_to_pdf_report(report: RetrievalReport, run_id: Optional[str] = None):
    """
    Returns:
        tuple: (pdf_bytes, filename)
    """
    pdf = export_frame_pdf(report_pivot(report).reset_index(), report.metadata)
    return pdf, f"retrieval_{run_id or 'report'}.pdf"


def format_report_table(report: RetrievalReport) -> str:
    """Aligned plain-text recall table (tasks x K)."""
    pivot = report_pivot(report)
    return pivot.to_string(float_format=lambda v: f"{v:.4f}")


def triplets_to_jsonl(rows: Iterable[Dict]) -> str:
    frame = pd.DataFrame(list(rows))
    if frame.empty:
        return ""
    return frame.to_json(orient="records", lines=True).rstrip("\n") + "\n"


def plot_crop_sweep(frame: pd.DataFrame, path: str, ks: Sequence[int] = (1, 5, 10)) -> str:
    """
    Recall@K against crop range, one line per K.

    Args:
        frame: Columns ``crop_range`` and ``R@K`` per K
        path: PNG destination
        ks: Cut-offs to draw

    Returns:
        str: path
    """
    try:
        fig, ax = plt.subplots(figsize=(6, 4))
        for k in ks:
            column = f"R@{k}"
            if column in frame.columns:
                ax.plot(frame["crop_range"], frame[column], marker="o", label=column)
        ax.set_xlabel("crop box size range (px)")
        ax.set_ylabel("object composition recall")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        return path
    except (OSError, ValueError) as e:
        raise ExportError(f"Plot export failed: {e}") from e


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(out_dir: str, command: str, config: Dict, config_hash: str,
                       artifacts: Sequence[str], extra: Optional[Dict] = None) -> str:
    """
    Write ``run_manifest.json``: command, config, config hash and the SHA-256
    of every artifact (paths relative to ``out_dir``).
    """
    try:
        hashes = {os.path.relpath(p, out_dir): sha256_file(p) for p in sorted(set(artifacts))}
        manifest = {"command": command, "config": config, "config_hash": config_hash, "artifacts": hashes}
        if extra:
            manifest.update(extra)
        path = os.path.join(out_dir, RUN_MANIFEST)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        return path
    except OSError as e:
        raise ExportError(f"Run manifest export failed: {e}") from e


def get_export_summary(report: RetrievalReport) -> Dict:
    """
    Short summary of a report for headers and logs.

    Returns:
        dict: task count, query count, best task at R@1
    """
    tasks = [r for r in report.rows if r["task"] != "average"]
    summary = {
        "Tasks": len({r["task"] for r in tasks}),
        "Queries": sum(r["queries"] for r in tasks if r["k"] == min(row["k"] for row in tasks)) if tasks else 0,
        "Config Hash": report.metadata.get("config_hash", "N/A"),
    }
    r1 = [r for r in tasks if r["k"] == 1]
    if r1:
        best = max(r1, key=lambda r: r["recall"])
        summary["Best R@1"] = f"{best['task']} ({best['recall']:.4f})"
    return summary

