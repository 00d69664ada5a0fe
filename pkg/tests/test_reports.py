import numpy as np
import pytest

from flexdepth import reports
from flexdepth.pruning import SubnetSpec, masks_from_scores


def make_export(L=16, sizes=(16, 8, 4), seed=0):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(L)
    masks = masks_from_scores(scores, SubnetSpec(sizes))
    return scores, masks


def test_mask_export_roundtrip():
    scores, masks = make_export()
    text = reports.render_mask_export(scores, masks)
    back = reports.parse_mask_export(text)
    np.testing.assert_array_equal(back.scores, scores)
    assert back.layer_counts == [16, 8, 4]
    for m1, m2 in zip(masks, back.masks):
        np.testing.assert_array_equal(m1, m2)


def test_mask_export_rejects_garbage():
    with pytest.raises(ValueError):
        reports.parse_mask_export("nonsense\n")


def test_block_groups_partition():
    for blocks in (1, 2, 3, 4, 5, 8, 12):
        groups = reports.block_groups(blocks)
        covered = [b for g in groups for b in g]
        assert covered == list(range(blocks))
        assert len(groups) == min(4, blocks)


def test_group_labels_one_indexed():
    groups = reports.block_groups(12)
    assert [reports.group_label(g) for g in groups] == \
        ["1-3", "4-6", "7-9", "10-12"]


def test_kept_counts_sum_to_k():
    scores, masks = make_export(L=32, sizes=(32, 16, 8), seed=3)
    groups = reports.block_groups(8)
    for mask in masks:
        counts = reports.kept_counts(mask, groups)
        assert counts.sum() == int(mask.sum())


def test_all_ones_mask_fills_group_capacity():
    L = 16
    mask = np.ones(L)
    groups = reports.block_groups(L // 4)
    counts = reports.kept_counts(mask, groups)
    for gi, group in enumerate(groups):
        assert counts[gi].sum() == 4 * len(group)
        assert np.all(counts[gi] == len(group))


def test_layer_report_renders_all_subnets():
    scores, masks = make_export()
    export = reports.MaskExport(scores, masks, [16, 8, 4])
    text = reports.render_layer_report(export)
    for k in (16, 8, 4):
        assert f"# subnet k={k}" in text
    assert "FFN1\tConv\tMHSA\tFFN2" in text


def test_svg_well_formed():
    scores, masks = make_export()
    export = reports.MaskExport(scores, masks, [16, 8, 4])
    svg = reports.render_layer_svg(export)
    assert svg.startswith("<svg") and svg.endswith("</svg>")
    assert svg.count("<rect") >= 3


def test_eval_report_format():
    rows = [{"name": "full", "k": 32, "params": 1000, "ler": 0.0213,
             "utterances": 200}]
    text = reports.render_eval_report(rows, [([1, 2], [1, 3])])
    assert "full\t32\t1000\t2.130\t200" in text
    assert "1 2 -> 1 3" in text
