import numpy as np
import pytest

from mmunlearn import evaluate as ev
from mmunlearn import report
from mmunlearn.errors import ContractError, InputError


def stage_records(n, seed=11):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(1, n + 1):
        out.append(ev.StageRecord(
            stage=s, per_task_forget_vqa=tuple(rng.uniform(size=s)),
            retain_vqa=float(rng.uniform()), rw_vqa=float(rng.uniform()),
            retain_qa=1.0, forget_qa=1.0))
    return out


SWEEP_CSV = (
    "alpha,beta,lam,forget_vqa,forget_qa,retain_vqa,retain_qa,rw_vqa,rw_qa,error\n"
    "0,1,1,0.2,1,0.9,1,0.8,1,\n"
    "0.5,1,1,0.15,1,0.92,1,0.81,1,\n"
    "1,1,1,0.1,1,0.95,1,0.83,1,\n"
    "1,0,1,0.3,1,0.7,1,0.6,1,NumericError\n")


def test_heatmap_png_bytes_deterministic(tmp_path):
    hm, _, _ = ev.export_continual(stage_records(3))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    report.save_heatmap_figure(hm, str(a))
    report.save_heatmap_figure(hm, str(b))
    assert a.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert a.read_bytes() == b.read_bytes()


def test_curves_figure(tmp_path):
    _, _, curves = ev.export_continual(stage_records(4))
    path = tmp_path / "curves.png"
    report.save_curves_figure(curves, str(path))
    assert path.stat().st_size > 0


def test_curves_empty_rejected(tmp_path):
    with pytest.raises(InputError):
        report.save_curves_figure("stage,cumulative_forget_vqa,retain_vqa,"
                                  "rw_vqa,retain_qa,forget_qa\n",
                                  str(tmp_path / "x.png"))


def test_loss_figure(tmp_path):
    losses = [{"push": 1.0 / (i + 1), "pull": 0.5, "ret": 0.1, "gum": 0.2,
               "total": 2.0 / (i + 1)} for i in range(10)]
    path = tmp_path / "loss.png"
    report.save_loss_figure(losses, str(path))
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_loss_figure_empty_rejected(tmp_path):
    with pytest.raises(InputError):
        report.save_loss_figure([], str(tmp_path / "x.png"))


def test_sweep_figure_skips_failed_rows(tmp_path):
    path = tmp_path / "sweep.png"
    report.save_sweep_figure(SWEEP_CSV, str(path))
    assert path.stat().st_size > 0


def test_sweep_figure_all_failed_rejected(tmp_path):
    header, *rows = SWEEP_CSV.strip().split("\n")
    bad = header + "\n" + "\n".join(
        r.rsplit(",", 1)[0] + ",ContractError" for r in rows) + "\n"
    with pytest.raises(ContractError):
        report.save_sweep_figure(bad, str(tmp_path / "x.png"))
