import csv
import io
from typing import Dict, List, Optional, Tuple

import numpy as np

from reachsynth.simulate import Trajectory


class TraceSheetGenerator:
    """CSV trace of a concrete run and its companion abstract run."""

    def __init__(self, n_x: int, n_u: int, n_w: int, nhat_x: int = 0, nhat_u: int = 0, nhat_w: int = 0):
        self.groups = [("x", n_x), ("u", n_u), ("w", n_w), ("xhat", nhat_x), ("uhat", nhat_u), ("what", nhat_w)]
        self.headers = ["t"] + [f"{name}{i}" for name, n in self.groups for i in range(n)]

    def generate(self, concrete: Trajectory, abstract: Optional[Trajectory] = None) -> str:
        """
        Generate a CSV trace sheet string.
        """
        if abstract is not None and len(abstract) != len(concrete):
            raise ValueError("concrete and abstract traces must be sampled at the same times")
        output = io.StringIO()
        writer = csv.DictWriter(output, fieldnames=self.headers, lineterminator="\n")
        writer.writeheader()

        columns = {"x": concrete.states, "u": concrete.controls, "w": concrete.disturbances}
        if abstract is not None:
            columns.update({"xhat": abstract.states, "uhat": abstract.controls, "what": abstract.disturbances})

        for k, t in enumerate(concrete.times):
            row = {"t": repr(float(t))}
            for name, n in self.groups:
                values = columns.get(name)
                for i in range(n):
                    # floats round-trip exactly through repr
                    row[f"{name}{i}"] = repr(float(values[k, i])) if values is not None else ""
            writer.writerow(row)

        return output.getvalue()

    @staticmethod
    def read(text: str) -> Tuple[Trajectory, Optional[Trajectory]]:
        """Parse a trace sheet back into (concrete, abstract) trajectories."""
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("trace sheet has no rows")
        headers = list(rows[0].keys())

        def block(name: str) -> np.ndarray:
            cols = [h for h in headers if h.rstrip("0123456789") == name]
            cols.sort(key=lambda h: int(h[len(name):]))
            if not cols or rows[0][cols[0]] == "":
                return np.zeros((len(rows), 0))
            return np.array([[float(r[c]) for c in cols] for r in rows])

        times = np.array([float(r["t"]) for r in rows])
        concrete = Trajectory(times, block("x"), block("u"), block("w"))
        xhat = block("xhat")
        abstract = Trajectory(times, xhat, block("uhat"), block("what")) if xhat.shape[1] else None
        return concrete, abstract


def trace_generator_for(es) -> TraceSheetGenerator:
    return TraceSheetGenerator(es.n_x, es.n_u, es.n_w, es.nhat_x, es.nhat_u, es.nhat_w)
