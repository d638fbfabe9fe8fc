"""Helpers shared by the experiment scripts."""
import argparse
import csv
import json
import math
from pathlib import Path

from ccflow.fptd import Boundary


def parser(doc: str, out: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=doc)
    ap.add_argument("--out", type=Path, default=Path("results") / out)
    return ap


def prepare(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def mean_offset_boundary(p, offset: float, slope: float, t_end: float) -> Boundary:
    span = t_end - p.t0
    return Boundary.analytic(lambda t: p.mean(t) + offset + slope * (t - p.t0) / span,
                             lambda t: p.mean_deriv(t) + slope / span)


def binomial_se(r: float, n: int) -> float:
    return math.sqrt(max(r * (1 - r), 0.0) / n)
