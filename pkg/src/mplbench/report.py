"""Report emission: layer-weight tables, SVG heatmaps, metric tables, and
pairwise run comparisons.

The heatmap is written as plain SVG (one rect per task x layer cell, linear
grayscale ramp, numeric label per cell) so tests can diff it as text.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .probe import weight_center_of_mass, weight_entropy


class ReportError(ValueError):
    pass


def _check_same_width(results):
    widths = {len(r["layer_weights"]) for r in results}
    if len(widths) != 1:
        raise ReportError(f"mismatched layer counts across results: {sorted(widths)}")
    return widths.pop()


def write_weights_csv(results, path):
    """One row per probe result; columns layer_0..layer_L."""
    width = _check_same_width(results)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task"] + [f"layer_{l}" for l in range(width)])
        for r in results:
            w.writerow([r["task"]] + [repr(float(x)) for x in r["layer_weights"]])


def read_weights_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return [(row[0], np.array([float(x) for x in row[1:]])) for row in rows[1:]]


def write_metrics_csv(results, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "metric", "center_of_mass", "entropy"])
        for r in results:
            w.writerow([
                r["task"],
                repr(float(r["metric"])),
                repr(weight_center_of_mass(r["layer_weights"])),
                repr(weight_entropy(r["layer_weights"])),
            ])


CELL = 64
LABEL_W = 160


def render_heatmap_svg(results, path):
    """Grid of tasks (rows) x layers (columns), grayscale by weight."""
    width = _check_same_width(results)
    n = len(results)
    img_w = LABEL_W + width * CELL
    img_h = (n + 1) * CELL
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{img_w}" height="{img_h}">',
        f'<rect width="{img_w}" height="{img_h}" fill="white"/>',
    ]
    for l in range(width):
        x = LABEL_W + l * CELL + CELL // 2
        parts.append(
            f'<text x="{x}" y="{CELL // 2}" text-anchor="middle" '
            f'font-size="12">L{l}</text>'
        )
    for i, r in enumerate(results):
        y0 = (i + 1) * CELL
        parts.append(
            f'<text x="8" y="{y0 + CELL // 2}" font-size="12">{r["task"]}</text>'
        )
        for l, wgt in enumerate(r["layer_weights"]):
            # linear ramp: weight 0 -> white, weight 1 -> black
            shade = int(round(255 * (1.0 - float(wgt))))
            fill = f"rgb({shade},{shade},{shade})"
            textfill = "white" if shade < 128 else "black"
            x0 = LABEL_W + l * CELL
            parts.append(
                f'<rect class="cell" x="{x0}" y="{y0}" width="{CELL}" '
                f'height="{CELL}" fill="{fill}" stroke="gray"/>'
            )
            parts.append(
                f'<text x="{x0 + CELL // 2}" y="{y0 + CELL // 2}" '
                f'text-anchor="middle" font-size="10" fill="{textfill}">'
                f"{float(wgt):.3f}</text>"
            )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def write_report(results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_weights_csv(results, os.path.join(out_dir, "weights.csv"))
    write_metrics_csv(results, os.path.join(out_dir, "metrics.csv"))
    render_heatmap_svg(results, os.path.join(out_dir, "heatmap.svg"))


@dataclass
class Delta:
    run_a: str
    run_b: str
    value_a: float
    value_b: float
    delta: float  # value_b - value_a
    verdict: str  # "b_higher" | "a_higher" | "tie"


def _delta(run_a, run_b, a, b, tol=0.0):
    d = b - a
    if abs(d) <= tol:
        verdict = "tie"
    else:
        verdict = "b_higher" if d > 0 else "a_higher"
    return Delta(run_a=run_a, run_b=run_b, value_a=float(a), value_b=float(b),
                 delta=float(d), verdict=verdict)


@dataclass
class ComparisonReport:
    run_a: str
    run_b: str
    content_accuracy: Delta
    speaker_accuracy: Delta
    speaker_center_of_mass: Delta
    content_entropy: Delta

    def to_json_dict(self):
        return {k: (asdict(v) if isinstance(v, Delta) else v)
                for k, v in asdict(self).items()}


def _load_run_probes(run_dir):
    pdir = os.path.join(run_dir, "probes")
    out = {}
    if not os.path.isdir(pdir):
        raise ReportError(f"no probes directory in {run_dir}")
    for name in sorted(os.listdir(pdir)):
        if name.endswith(".json"):
            with open(os.path.join(pdir, name)) as f:
                r = json.load(f)
            out[r["task"]] = r
    return out


def compare(run_dir_a, run_dir_b) -> ComparisonReport:
    """Directional comparison of two probed runs."""
    a = _load_run_probes(run_dir_a)
    b = _load_run_probes(run_dir_b)
    if set(a) != set(b):
        raise ReportError(f"runs probed on different tasks: {sorted(a)} vs {sorted(b)}")
    for task in a:
        if len(a[task]["layer_weights"]) != len(b[task]["layer_weights"]):
            raise ReportError(f"runs have different layer counts for task {task}")
    if "frame_content" not in a or "utterance_speaker" not in a:
        raise ReportError("comparison needs frame_content and utterance_speaker probes")
    ra, rb = os.path.basename(os.path.normpath(run_dir_a)), \
        os.path.basename(os.path.normpath(run_dir_b))
    return ComparisonReport(
        run_a=ra,
        run_b=rb,
        content_accuracy=_delta(ra, rb, a["frame_content"]["metric"],
                                b["frame_content"]["metric"]),
        speaker_accuracy=_delta(ra, rb, a["utterance_speaker"]["metric"],
                                b["utterance_speaker"]["metric"]),
        speaker_center_of_mass=_delta(
            ra, rb,
            weight_center_of_mass(a["utterance_speaker"]["layer_weights"]),
            weight_center_of_mass(b["utterance_speaker"]["layer_weights"])),
        content_entropy=_delta(
            ra, rb,
            weight_entropy(a["frame_content"]["layer_weights"]),
            weight_entropy(b["frame_content"]["layer_weights"])),
    )
