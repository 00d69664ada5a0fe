"""Artifact documents: mask exports, per-size evaluation tables, and the
kept-layer distribution report (block-group x layer-kind counts, with
optional SVG stacked bars)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import LayerId

KIND_LABELS = ("FFN1", "Conv", "MHSA", "FFN2")
SVG_COLORS = ("#9acd32", "#d2b48c", "#4682b4", "#f0c431")


# -- mask export -------------------------------------------------------------


def render_mask_export(scores: np.ndarray, masks: list[np.ndarray]) -> str:
    """Structured text: raw scores plus, per subnet, k and the kept layers."""
    lines = ["scores: " + " ".join(repr(float(s)) for s in scores)]
    for mask in masks:
        kept = [LayerId.from_flat(j).name
                for j in range(mask.size) if mask[j] == 1.0]
        lines.append(f"subnet k={int(mask.sum())}: " + " ".join(kept))
    return "\n".join(lines) + "\n"


@dataclass
class MaskExport:
    scores: np.ndarray
    masks: list[np.ndarray]          # binary, one per subnet
    layer_counts: list[int]

    @property
    def num_layers(self) -> int:
        return self.scores.size


def parse_mask_export(text: str) -> MaskExport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("scores:"):
        raise ValueError("mask export must start with a 'scores:' line")
    scores = np.array([float(tok) for tok in lines[0].split(":", 1)[1].split()])
    masks = []
    ks = []
    for line in lines[1:]:
        head, _, body = line.partition(":")
        k = int(head.strip().removeprefix("subnet k="))
        mask = np.zeros(scores.size)
        for name in body.split():
            mask[LayerId.parse(name).flat] = 1.0
        if int(mask.sum()) != k:
            raise ValueError(f"mask export line inconsistent: {line!r}")
        masks.append(mask)
        ks.append(k)
    return MaskExport(scores, masks, ks)


# -- layer distribution report -------------------------------------------------


def block_groups(blocks: int, max_groups: int = 4) -> list[range]:
    """Partition [0, blocks) into up to max_groups contiguous ranges,
    earlier groups taking the extras."""
    n_groups = min(max_groups, blocks)
    base, extra = divmod(blocks, n_groups)
    groups = []
    start = 0
    for g in range(n_groups):
        size = base + (1 if g < extra else 0)
        groups.append(range(start, start + size))
        start += size
    return groups


def group_label(group: range) -> str:
    return f"{group.start + 1}-{group.stop}"   # 1-indexed, inclusive


def kept_counts(mask: np.ndarray, groups: list[range]) -> np.ndarray:
    """[group, kind] counts of kept layers."""
    counts = np.zeros((len(groups), 4), dtype=int)
    for j in range(mask.size):
        if mask[j] == 1.0:
            lid = LayerId.from_flat(j)
            for gi, group in enumerate(groups):
                if lid.block in group:
                    counts[gi, int(lid.kind)] += 1
                    break
    return counts


def render_layer_report(export: MaskExport) -> str:
    blocks = export.num_layers // 4
    groups = block_groups(blocks)
    lines = []
    for mask, k in zip(export.masks, export.layer_counts):
        counts = kept_counts(mask, groups)
        lines.append(f"# subnet k={k}")
        lines.append("blocks\t" + "\t".join(KIND_LABELS))
        for gi, group in enumerate(groups):
            lines.append(group_label(group) + "\t"
                         + "\t".join(str(c) for c in counts[gi]))
        lines.append("")
    return "\n".join(lines)


def render_layer_svg(export: MaskExport) -> str:
    """Stacked bars of kept-layer counts per block group, one chart row
    per subnet size."""
    blocks = export.num_layers // 4
    groups = block_groups(blocks)
    bar_w, gap, chart_h, pad, label_h = 48, 24, 120, 36, 34
    per_group_cap = max(4 * len(g) for g in groups)
    chart_w = pad + len(groups) * (bar_w + gap) + pad
    total_h = (chart_h + label_h + pad) * len(export.masks) + pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{chart_w + 140}" height="{total_h}" '
             f'font-family="sans-serif" font-size="11">']
    y0 = pad
    for mask, k in zip(export.masks, export.layer_counts):
        counts = kept_counts(mask, groups)
        parts.append(f'<text x="{pad}" y="{y0 - 8}">subnet k={k}</text>')
        for gi, group in enumerate(groups):
            x = pad + gi * (bar_w + gap)
            y = y0 + chart_h
            for kind in range(4):
                h = counts[gi, kind] / per_group_cap * chart_h
                y -= h
                if h > 0:
                    parts.append(
                        f'<rect x="{x}" y="{y:.1f}" width="{bar_w}" '
                        f'height="{h:.1f}" fill="{SVG_COLORS[kind]}" '
                        f'stroke="#444" stroke-width="0.5"/>')
            parts.append(f'<text x="{x}" y="{y0 + chart_h + 14}">'
                         f'{group_label(group)}</text>')
        y0 += chart_h + label_h + pad
    legend_x = chart_w + 10
    for kind, label in enumerate(KIND_LABELS):
        ly = pad + kind * 18
        parts.append(f'<rect x="{legend_x}" y="{ly}" width="12" height="12" '
                     f'fill="{SVG_COLORS[kind]}"/>')
        parts.append(f'<text x="{legend_x + 18}" y="{ly + 10}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# -- evaluation report -----------------------------------------------------------


def render_eval_report(rows: list[dict], samples: list[tuple] = (),
                       split: str = "test") -> str:
    """rows: dicts with keys name, k, params, ler (fraction), utterances."""
    lines = [f"# evaluation on split: {split}",
             "name\tk\tparams\tler_percent\tutterances"]
    for row in rows:
        lines.append(f"{row['name']}\t{row['k']}\t{row['params']}\t"
                     f"{row['ler'] * 100:.3f}\t{row['utterances']}")
    if samples:
        lines.append("")
        lines.append("# sample decodes (ref -> hyp)")
        for ref, hyp in samples:
            lines.append(f"{' '.join(map(str, ref))} -> "
                         f"{' '.join(map(str, hyp))}")
    return "\n".join(lines) + "\n"
