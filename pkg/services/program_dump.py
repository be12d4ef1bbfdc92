"""Line-oriented text dump of conic programs for external cross-checks."""

from typing import Dict, List

import numpy as np
from jinja2 import Environment, FileSystemLoader

from config import TEMPLATES_DIR
from services.conic_solver import ConicProgram


def _num(value: float) -> str:
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def _rows(a: np.ndarray, b: np.ndarray, labels) -> List[Dict]:
    rows = []
    for r in range(a.shape[0]):
        nz = np.flatnonzero(a[r])
        rows.append({
            "label": labels[r] if r < len(labels) else f"r{r}",
            "rhs": _num(b[r]),
            "coefs": [(int(k), _num(a[r, k])) for k in nz],
        })
    return rows


class ProgramDumper:
    """Render a ConicProgram through the bundled template."""

    def __init__(self):
        self.env = Environment(
            loader=FileSystemLoader(str(TEMPLATES_DIR)),
            keep_trailing_newline=True,
        )

    def render(self, prog: ConicProgram, title: str = "gridflex conic program") -> str:
        unc = prog.uncertainty
        tightened = []
        if unc is not None and unc.tightening is not None:
            tightened = [
                {"label": prog.ub_labels[r] if r < len(prog.ub_labels) else f"r{r}", "amount": _num(t)}
                for r, t in enumerate(unc.tightening) if t != 0.0
            ]
        context = {
            "title": title,
            "variables": [
                {"index": k, "name": name, "lb": _num(prog.lb[k]), "ub": _num(prog.ub[k])}
                for k, name in enumerate(prog.names)
            ],
            "constant": _num(prog.constant),
            "objective": [(int(k), _num(prog.c[k])) for k in np.flatnonzero(prog.c)],
            "eq_rows": _rows(prog.A_eq, prog.b_eq, prog.eq_labels),
            "ub_rows": _rows(prog.A_ub, prog.b_ub, prog.ub_labels),
            "cones": prog.cones,
            "uncertainty": unc,
            "tightened": tightened,
        }
        template = self.env.get_template("conic_program.txt.j2")
        return template.render(**context)
