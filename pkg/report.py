"""
Study output: CSV and markdown tables of a convergence report, and legacy
VTK export of per-cell solution fields.
"""

import csv
import io
import logging
import os
from dataclasses import asdict, is_dataclass

import meshio
import numpy as np

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    'method', 'dim', 'level', 'h', 'n_dof',
    'err_r', 'rate_r', 'err_q', 'rate_q', 'err_p', 'rate_p',
    'inv_p', 'inv_curl', 'inv_r2d', 'max_div',
]
INTEGER_COLUMNS = ('dim', 'level', 'n_dof')

METHOD_TITLES = {'3f': '3F-MFEM', 'mv': 'MV-MFEM'}
TABLE_COLUMNS = [('n_dof', 'N_dof'), ('err_r', 'Err_r'), ('rate_r', 'Rate_r'),
                 ('err_q', 'Err_q'), ('rate_q', 'Rate_q'), ('err_p', 'Err_p'), ('rate_p', 'Rate_p')]

VTK_CELL_TYPES = {2: 'triangle', 3: 'tetra'}


def _as_dict(row):
    return asdict(row) if is_dataclass(row) else dict(row)


def _csv_value(value):
    if value is None:
        return ''
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.16e}"
    return str(value)


def render_csv(rows):
    """CSV text with one line per (method, level); missing values stay blank."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        row = _as_dict(row)
        writer.writerow([_csv_value(row.get(column)) for column in CSV_COLUMNS])
    return buffer.getvalue()


def parse_csv(text):
    """Rows of a CSV produced by render_csv, with numbers parsed and blanks as None."""
    rows = []
    for record in csv.DictReader(io.StringIO(text)):
        row = {}
        for column in CSV_COLUMNS:
            value = record.get(column, '')
            if column == 'method':
                row[column] = value
            elif value == '':
                row[column] = None
            elif column in INTEGER_COLUMNS:
                row[column] = int(value)
            else:
                row[column] = float(value)
        rows.append(row)
    return rows


def _cell(key, value):
    if value is None:
        return ''
    if key == 'n_dof':
        return str(int(value))
    if key.startswith('rate'):
        return f"{value:.2f}"
    return f"{value:.2e}"


def render_markdown(rows, tolerances=None, failures=None, title='Convergence study'):
    """
    Table with one line per (dim, level) and, for each method, dof count,
    relative errors and rates of r, q and p.
    """
    rows = [_as_dict(row) for row in rows]
    methods = list(dict.fromkeys(row['method'] for row in rows))
    lines = [f"# {title}", ""]
    if tolerances:
        lines.append("Tolerances: " + ", ".join(f"{k}={v:g}" for k, v in tolerances.items()))
        lines.append("")

    header = ['dim', 'n', 'h']
    for method in methods:
        name = METHOD_TITLES.get(method, method)
        header.extend(f"{name} {label}" for _, label in TABLE_COLUMNS)
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))

    levels = {}
    for row in rows:
        levels.setdefault((row['dim'], row['level']), {})[row['method']] = row
    for (dim, _), by_method in sorted(levels.items()):
        first = next(iter(by_method.values()))
        cells = [str(dim), str(first.get('n', '')), f"{first['h']:.2e}"]
        for method in methods:
            row = by_method.get(method, {})
            cells.extend(_cell(key, row.get(key)) for key, _ in TABLE_COLUMNS)
        lines.append("| " + " | ".join(cells) + " |")

    if failures:
        lines.extend(["", "## Failures", ""])
        lines.extend(f"- {failure}" for failure in failures)
    return "\n".join(lines) + "\n"


def render_report(report, fmt):
    if fmt == 'csv':
        return render_csv(report.rows)
    if fmt in ('md', 'markdown'):
        return render_markdown(report.rows, report.tolerances(), report.failures)
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report, fmt, path):
    """Write ``report`` as CSV or markdown to ``path``; OSError if unwritable."""
    text = render_report(report, fmt)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        f.write(text)
    logger.info("Wrote %s report to %s", fmt, path)
    return path


def export_vtk(mesh, fields, path):
    """
    Legacy ASCII VTK unstructured grid with one CELL_DATA array per field.

    Fields are per-cell arrays of shape (n_cells,) or (n_cells, k); vectors
    are padded to three components and 2D points to z = 0.
    """
    points = np.asarray(mesh.vertices, dtype=float)
    if points.shape[1] == 2:
        points = np.column_stack([points, np.zeros(len(points))])

    cell_data = {}
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if len(values) != mesh.n_cells:
            raise ValueError(f"field {name!r} has {len(values)} values for {mesh.n_cells} cells")
        if values.ndim == 2 and values.shape[1] < 3:
            values = np.column_stack([values, np.zeros((len(values), 3 - values.shape[1]))])
        cell_data[name] = [values]

    grid = meshio.Mesh(points, [(VTK_CELL_TYPES[mesh.dim], mesh.cells)], cell_data=cell_data)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    meshio.write(path, grid, file_format='vtk', binary=False)
    logger.debug("Wrote %d cells to %s", mesh.n_cells, path)
    return path
