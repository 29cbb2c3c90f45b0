"""Attention diagnostics: mean attention maps and the spatial/prior mass
split per block and head, written as CSV."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

#: GAP-mode prior tokens carry no trimap class; their mass is reported in
#: the uk column (noted in the CSV header).
_CLASS_COLUMN = {"uk": "uk", "fg": "fg", "bg": "bg", "gap": "uk"}


@dataclass
class AttnReport:
    #: rows of (stage, block, head, spatial, uk, fg, bg)
    rows: list = field(default_factory=list)

    def masses(self, stage, block, head):
        for r in self.rows:
            if (r["stage"], r["block"], r["head"]) == (stage, block, head):
                return r
        raise KeyError((stage, block, head))


def capture_records_to_report(records) -> AttnReport:
    """Reduce captured attention tensors to per-head mean mass splits."""
    if not records:
        raise ContractError(
            "no attention records; run the forward pass with capture enabled")
    report = AttnReport()
    for rec in records:
        attn = rec["attn"]  # [nW, heads, T, K]
        classes = rec["classes"]
        t = attn.shape[2]
        mean = attn.mean(axis=(0, 2))  # [heads, K]
        for head in range(mean.shape[0]):
            row = {"stage": rec["stage"], "block": rec["block"], "head": head,
                   "spatial": float(mean[head, :t].sum()),
                   "uk": 0.0, "fg": 0.0, "bg": 0.0}
            for j, cls in enumerate(classes):
                row[_CLASS_COLUMN[cls]] += float(mean[head, t + j])
            report.rows.append(row)
    return report


def dump_attention(records, out_dir) -> AttnReport:
    """Write per-block mean attention maps and the mass split as CSV."""
    report = capture_records_to_report(records)
    os.makedirs(out_dir, exist_ok=True)
    for rec in records:
        attn = rec["attn"].mean(axis=0)  # [heads, T, K], averaged over windows
        path = os.path.join(
            out_dir, f"attn_stage{rec['stage']}_block{rec['block']}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["# prior columns:", *rec["classes"]])
            writer.writerow(["head", "query"]
                            + [f"k{j}" for j in range(attn.shape[2])])
            for head in range(attn.shape[0]):
                for q in range(attn.shape[1]):
                    writer.writerow([head, q] + attn[head, q].tolist())
    with open(os.path.join(out_dir, "mass_split.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# gap-mode prior mass is reported under uk"])
        writer.writerow(["stage", "block", "head", "spatial", "uk", "fg",
                         "bg"])
        for r in report.rows:
            writer.writerow([r["stage"], r["block"], r["head"], r["spatial"],
                             r["uk"], r["fg"], r["bg"]])
    return report
