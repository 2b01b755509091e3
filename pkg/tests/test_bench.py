import csv

import numpy as np
import pytest

from bers.bench import PIPELINES, WARMUP, run_bench
from bers.cli import main
from bers.net import build_student, build_teacher
from bers.synthvid import DatasetSpec, generate
from bers.train import default_net_config


@pytest.fixture(scope="module")
def setup():
    ds = generate(DatasetSpec(num_classes=4, clips_per_class=3, frames=5, height=16, width=16, size_min=4, size_max=6))
    cfg = default_net_config(ds)
    return ds, build_student(cfg, 0), build_teacher(cfg, 0)


@pytest.fixture(scope="module")
def report(setup):
    ds, student, teacher = setup
    return run_bench(student, teacher, ds.clips[:6], repeat=3, warmup_clips=ds.clips[6:8])


def test_counters(report):
    rgb, flow, comb = (report.pipelines[n].counters for n in PIPELINES)
    assert rgb["tvl1_calls"] == 0 and rgb["teacher_forwards"] == 0 and rgb["student_forwards"] == 6
    assert flow["tvl1_calls"] == 4 * 6 and flow["teacher_forwards"] == 6 and flow["student_forwards"] == 0
    assert comb["tvl1_calls"] == (5 - 1) * 6 and comb["teacher_forwards"] == 6 and comb["student_forwards"] == 6


def test_ordering_and_ratio(report):
    assert report.pipelines["rgb_only"].times_ms.shape == (3, 6)
    assert report.ordered_every_rep
    assert report.ratio > 1
    rgb, comb = report.pipelines["rgb_only"], report.pipelines["combined"]
    assert report.ratio == comb.mean_ms / rgb.mean_ms
    for s in report.pipelines.values():
        assert s.median_ms <= s.p95_ms and 0 <= s.accuracy <= 1


def test_rejects_few_repeats(setup):
    ds, student, teacher = setup
    with pytest.raises(ValueError):
        run_bench(student, teacher, ds.clips[:2], repeat=2)
    assert WARMUP == 2


def test_csv_parses_back(report, tmp_path):
    path = tmp_path / "b.csv"
    report.write_csv(path)
    rows = list(csv.DictReader(open(path, newline="")))
    assert [r["pipeline"] for r in rows] == list(PIPELINES)
    for r, name in zip(rows, PIPELINES):
        s = report.pipelines[name]
        assert float(r["mean_ms"]) == s.mean_ms and float(r["p95_ms"]) == s.p95_ms
        assert int(r["tvl1_calls"]) == s.counters["tvl1_calls"]
        assert np.array_equal([float(v) for v in r["rep_means_ms"].split(";")], s.rep_means)
        assert float(r["ratio"]) == report.ratio
    assert "ratio" in report.summary()


def test_bench_command(setup, tmp_path, capsys):
    from bers.checkpoint import save_checkpoint
    from bers.synthvid import write_dataset

    ds, student, teacher = setup
    write_dataset(tmp_path / "d.bvds", ds)
    save_checkpoint(student, tmp_path / "s.bck")
    save_checkpoint(teacher, tmp_path / "t.bck")
    args = ["bench", "--student", str(tmp_path / "s.bck"), "--teacher", str(tmp_path / "t.bck"),
            "--data", str(tmp_path / "d.bvds"), "--split", "all", "--clips", "4"]
    assert main([*args, "--out", str(tmp_path / "b.csv")]) == 0
    assert "combined / rgb_only" in capsys.readouterr().out
    assert len(list(csv.DictReader(open(tmp_path / "b.csv")))) == 3
    assert main([*args, "--repeat", "2"]) == 1
    swapped = ["bench", "--student", str(tmp_path / "t.bck"), "--teacher", str(tmp_path / "s.bck"),
               "--data", str(tmp_path / "d.bvds")]
    assert main(swapped) == 2
