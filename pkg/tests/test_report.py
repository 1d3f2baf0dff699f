"""Report artifacts at the library level: CSV content and figure rendering."""

import numpy as np

from addv import datagen as dg
from addv.nets import DepthNet
from addv.report import bins_report, items_from_triplets


def test_bins_report_writes_csv_and_svg(tmp_path):
    triplets = [dg.generate_triplet(dg.random_scene(s, "two-plane")) for s in range(2)]
    net = DepthNet(n_bins=8, seed=1)
    items = items_from_triplets(triplets)
    written = bins_report(net, items, tmp_path)
    names = {p.name for p in written}
    assert names == {
        "00000_bins.csv", "00000_disp_hist.csv", "00000_bins.svg", "00000_disp_hist.svg",
        "00001_bins.csv", "00001_disp_hist.csv", "00001_bins.svg", "00001_disp_hist.svg",
    }
    rows = (tmp_path / "00000_bins.csv").read_text().strip().splitlines()
    assert rows[0] == "scale,index,value"
    assert len(rows) == 1 + 4 * 8  # four scales, eight bins each
    svg = (tmp_path / "00000_bins.svg").read_text()
    assert svg.startswith("<?xml")


def test_report_deterministic_bytes(tmp_path):
    triplet = dg.generate_triplet(dg.random_scene(3, "two-plane"))
    net = DepthNet(n_bins=8, seed=1)
    for sub in ("a", "b"):
        bins_report(net, [("img", triplet.target, triplet.gt_depth)], tmp_path / sub)
    for name in ("img_bins.csv", "img_disp_hist.csv", "img_bins.svg", "img_disp_hist.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_histogram_includes_gt_column_only_with_depth(tmp_path):
    triplet = dg.generate_triplet(dg.random_scene(4, "two-plane"))
    net = DepthNet(n_bins=8, seed=1)
    bins_report(net, [("with_gt", triplet.target, triplet.gt_depth),
                      ("no_gt", triplet.target, None)], tmp_path, render_figures=False)
    with_gt = (tmp_path / "with_gt_disp_hist.csv").read_text().strip().splitlines()[1]
    no_gt = (tmp_path / "no_gt_disp_hist.csv").read_text().strip().splitlines()[1]
    assert with_gt.split(",")[3] != ""
    assert no_gt.split(",")[3] == ""
    # ground-truth histogram also conserves pixels
    rows = (tmp_path / "with_gt_disp_hist.csv").read_text().strip().splitlines()[1:]
    assert sum(int(r.split(",")[3]) for r in rows) == 64 * 64
