from __future__ import annotations

import re

import pytest

from loralab.errors import PlotError
from loralab.experiments import MetricsRecord, MetricsWriter
from loralab.plots import emit_plot, render_svg


def write_metrics(path, ns, schemes=("vanilla", "d2lora"), seeds=(0, 1), metric="exact_match"):
    w = MetricsWriter(path)
    for scheme in schemes:
        for n in ns:
            for seed in seeds:
                value = 0.1 * seed + n / 10_000 + (0.05 if scheme == "d2lora" else 0.0)
                w.write(MetricsRecord("effectiveness", "sft", scheme, 0, n, seed, metric, value, 1.5))
    w.close()
    return path


def test_two_series_of_four_points_give_two_polylines(tmp_path):
    svg = emit_plot(write_metrics(tmp_path / "m.jsonl", (100, 200, 500, 1000))).read_text()
    lines = re.findall(r'<polyline points="([^"]+)"', svg)
    assert len(lines) == 2
    assert all(len(pts.split()) == 4 for pts in lines)
    assert "sft/vanilla" in svg and "sft/d2lora" in svg


def test_identical_input_gives_identical_bytes(tmp_path):
    path = write_metrics(tmp_path / "m.jsonl", (0, 100, 2000))
    a = emit_plot(path, out=tmp_path / "a.svg").read_bytes()
    b = emit_plot(path, out=tmp_path / "b.svg").read_bytes()
    assert a == b and a.startswith(b"<svg")


def test_gap_plot_has_one_series_per_method(tmp_path):
    svg = emit_plot(write_metrics(tmp_path / "m.jsonl", (100, 2000)), kind="gap").read_text()
    assert len(re.findall("<polyline", svg)) == 1 and "sft/d2lora-vanilla" in svg


def test_single_point_series_is_an_error(tmp_path):
    with pytest.raises(PlotError, match="1 point"):
        emit_plot(write_metrics(tmp_path / "m.jsonl", (100,)))


def test_empty_inputs(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(PlotError):
        emit_plot(tmp_path / "e.jsonl")
    with pytest.raises(PlotError):
        render_svg({}, "t", "y")
    with pytest.raises(PlotError):
        emit_plot(write_metrics(tmp_path / "m.jsonl", (1, 2)), kind="pie")


def test_zero_sample_count_sits_left_of_smallest_positive():
    svg = render_svg({"s": {0: [0.5], 10: [0.4], 100: [0.3]}}, "t", "y")
    xs = [float(p.split(",")[0]) for p in re.search(r'<polyline points="([^"]+)"', svg).group(1).split()]
    assert xs[0] < xs[1] < xs[2]
    # 0 sits half a decade left of 10, and 10 -> 100 is one decade
    assert abs((xs[1] - xs[0]) * 2 - (xs[2] - xs[1])) < 0.02
