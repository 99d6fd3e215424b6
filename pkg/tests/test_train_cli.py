import importlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from topreid import cli
from topreid import tensor as T
from topreid.checkpoint import load_checkpoint
from topreid.config import RunConfig
from topreid.data import save_dataset, synth_dataset
from topreid.evaluation import evaluate
from topreid.gradcheck import GradCheckReport, micro_config
from topreid.train import SGD, TrainingError, build_datasets, lr_at, model_from_checkpoint, train

# -- schedule and optimiser ----------------------------------------------------------

def test_warmup_starts_at_a_tenth_and_reaches_base():
    assert lr_at(0, 0.009, 100, 2000) == pytest.approx(0.0009)
    assert lr_at(50, 0.009, 100, 2000) == pytest.approx(0.0009 + 0.5 * 0.0081)
    assert lr_at(100, 0.009, 100, 2000) == pytest.approx(0.009)


def test_cosine_reaches_zero():
    assert lr_at(2000, 0.009, 100, 2000) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(1050, 0.009, 100, 2000) == pytest.approx(0.0045)
    lrs = [lr_at(s, 0.009, 100, 2000) for s in range(100, 2001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_matches_hand_update():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([("p", p)], lr=0.1, momentum=0.9, weight_decay=0.01)
    g = np.array([0.5, 0.5])
    grads = T.GradMap({p.uid: g})
    opt.step(grads)
    buf = g + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * buf)
    before = p.data.copy()
    opt.step(grads)
    buf = 0.9 * buf + g + 0.01 * before
    np.testing.assert_allclose(p.data, before - 0.1 * buf)


def test_sgd_clipping_scales_the_gradient():
    p = T.Tensor(np.zeros(2), requires_grad=True)
    opt = SGD([("p", p)], lr=1.0, momentum=0.0, weight_decay=0.0, grad_clip=1.0)
    norm = opt.step(T.GradMap({p.uid: np.array([3.0, 4.0])}))
    assert norm == 5.0
    np.testing.assert_allclose(p.data, [-0.6, -0.8])


def test_sgd_leaves_unused_parameters_to_weight_decay():
    p = T.Tensor(np.ones(2), requires_grad=True)
    SGD([("p", p)], lr=1.0, momentum=0.0, weight_decay=0.5).step(T.GradMap({}))
    np.testing.assert_allclose(p.data, [0.5, 0.5])


# -- training loop --------------------------------------------------------------------

def test_training_writes_metrics_and_checkpoint(quick_cfg, tmp_path):
    result = train(quick_cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == quick_cfg.optim.total_steps == len(result.history)
    rec = json.loads(lines[0])
    for key in ("step", "lr", "l_ce_vit", "l_tri_vit", "l_ce_tp", "l_tri_tp", "l_cr", "total"):
        assert key in rec
    assert rec["lr"] == pytest.approx(quick_cfg.optim.lr / 10)
    assert rec["total"] == pytest.approx(rec["l_ce_vit"] + rec["l_tri_vit"] + rec["l_ce_tp"] + rec["l_tri_tp"] + rec["l_cr"], rel=1e-5)
    ckpt = load_checkpoint(tmp_path / "model.ckpt")
    assert ckpt.step == quick_cfg.optim.total_steps
    assert RunConfig.from_text(ckpt.config_text) == quick_cfg
    assert set(ckpt.momentum) == set(ckpt.params)


def test_training_is_run_to_run_reproducible(quick_cfg):
    a, b = train(quick_cfg), train(quick_cfg)
    assert a.history == b.history
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_seed_changes_the_run(quick_cfg):
    other = quick_cfg.replace(run={"seed": 1})
    assert train(quick_cfg).history[-1]["total"] != train(other).history[-1]["total"]


def test_non_finite_loss_aborts_with_the_step(quick_cfg, monkeypatch):
    train_mod = importlib.import_module("topreid.train")

    real = train_mod.total_loss
    calls = {"n": 0}

    def poisoned(model, images, labels):
        loss, report = real(model, images, labels)
        calls["n"] += 1
        if calls["n"] == 4:
            report.total = math.nan
        return loss, report

    monkeypatch.setattr(train_mod, "total_loss", poisoned)
    with pytest.raises(TrainingError, match="step 3"):
        train(quick_cfg)


def test_ablation_switches_zero_their_terms(quick_cfg):
    hist = train(quick_cfg.replace(tpm={"enabled": False}, crm={"enabled": False})).history
    assert all(r["l_ce_tp"] == r["l_tri_tp"] == r["l_cr"] == 0.0 for r in hist)


def test_bl_and_float64_runs(quick_cfg):
    result = train(quick_cfg.replace(loss={"mode": "BL"}, run={"precision": "float64"}))
    assert all(p.dtype == np.float64 for p in result.model.parameters())


def test_heldout_split_has_disjoint_identities(quick_cfg):
    train_set, held = build_datasets(quick_cfg.replace(data={"eval_split": "heldout", "heldout_ids": 3}))
    assert set(train_set.identities).isdisjoint(held.identities)
    assert len(held.identities) == 3


def test_path_dataset_needs_eval_root_for_heldout(quick_cfg, tmp_path):
    save_dataset(synth_dataset(num_ids=2, cams=1, samples_per_id_cam=2, height=16, width=8), tmp_path)
    cfg = quick_cfg.replace(data={"source": "path", "root": str(tmp_path), "eval_split": "heldout"})
    with pytest.raises(TrainingError):
        build_datasets(cfg)


def test_checkpoint_restores_identical_evaluation(quick_cfg, tmp_path):
    result = train(quick_cfg, out_dir=tmp_path)
    before = evaluate(result.model, result.eval_set).to_dict()
    restored = model_from_checkpoint(quick_cfg, tmp_path / "model.ckpt")
    assert evaluate(restored, result.eval_set).to_dict() == before


# -- command line ----------------------------------------------------------------------

@pytest.fixture
def cfg_file(quick_cfg, tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(quick_cfg.to_text())
    return path


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_train_eval_export(cfg_file, tmp_path, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run_cli(capsys, "train", "-c", cfg_file, "-o", out_dir)
    assert code == 0
    info = json.loads(out)
    assert info["steps"] == 12 and (out_dir / "model.ckpt").exists()

    code, out, _ = run_cli(capsys, "eval", "-c", cfg_file, "-k", out_dir / "model.ckpt")
    assert code == 0
    full = json.loads(out)
    assert full["missing_set"] == [] and set(full["cmc"]) == {"1", "5", "10"}
    code, out2, _ = run_cli(capsys, "eval", "-c", cfg_file, "-k", out_dir / "model.ckpt")
    assert out2 == out

    code, out, _ = run_cli(capsys, "eval", "-c", cfg_file, "-k", out_dir / "model.ckpt", "-m", "NIR,TIR")
    assert code == 0 and json.loads(out)["missing_set"] == ["N", "T"]
    code, out, _ = run_cli(capsys, "eval", "-c", cfg_file, "-k", out_dir / "model.ckpt", "-m", "N", "--fill", "zeros")
    assert code == 0

    csv_path = tmp_path / "emb.csv"
    code, out, _ = run_cli(capsys, "export", "-c", cfg_file, "-k", out_dir / "model.ckpt", "-o", csv_path)
    assert code == 0 and json.loads(out)["rows"] == 16
    header, *rows = csv_path.read_text().splitlines()
    assert header.split(",")[3:] == [f"f{j}" for j in range(48)]
    _, data = build_datasets(RunConfig.from_file(cfg_file))
    assert [int(r.split(",")[0]) for r in rows] == [t.identity for t in data.triples]


@pytest.mark.parametrize(
    "argv, fragment",
    [
        (["eval", "-c", "nope.cfg", "-k", "x"], "config file not found"),
        (["eval", "-c", "{cfg}", "-k", "nope.ckpt"], "checkpoint not found"),
        (["eval", "-c", "{cfg}", "-k", "{cfg}"], "not a checkpoint"),
        (["eval", "-c", "{bad}", "-k", "x"], "unknown key"),
    ],
)
def test_cli_errors_are_one_line(cfg_file, tmp_path, capsys, argv, fragment):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nwidth = 3\n")
    argv = [a.format(cfg=cfg_file, bad=bad) for a in argv]
    code, out, err = run_cli(capsys, *argv)
    assert code == cli.EXIT_ERROR and out == ""
    assert err.startswith("topreid: error:") and fragment in err and err.count("\n") == 1


def test_cli_bad_missing_flag(cfg_file, tmp_path, capsys):
    run_cli(capsys, "train", "-c", cfg_file, "-o", tmp_path / "r")
    code, _, err = run_cli(capsys, "eval", "-c", cfg_file, "-k", tmp_path / "r" / "model.ckpt", "-m", "UV")
    assert code == cli.EXIT_ERROR and "unknown spectrum" in err


def test_cli_mismatched_checkpoint_names_parameter(cfg_file, quick_cfg, tmp_path, capsys):
    run_cli(capsys, "train", "-c", cfg_file, "-o", tmp_path / "r")
    other = tmp_path / "other.cfg"
    other.write_text(quick_cfg.replace(model={"embed_dim": 8}).to_text())
    code, _, err = run_cli(capsys, "eval", "-c", other, "-k", tmp_path / "r" / "model.ckpt")
    assert code == cli.EXIT_ERROR and "parameter 'encoders.streams.R" in err


def test_cli_gradcheck_reports_json(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--coords", "2")
    report = json.loads(out)
    assert code == 0 and report["passed"] and report["coords_per_param"] == 2


def test_cli_gradcheck_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_gradcheck", lambda *a, **k: GradCheckReport(0.5, {"w": 0.5}))
    code, _, err = run_cli(capsys, "gradcheck")
    assert code == cli.EXIT_CHECK_FAILED and "w" in err


def test_micro_config_shape():
    m = micro_config().model_config(num_classes=2).encoder
    assert (m.embed_dim, m.depth, m.num_patches, m.heads) == (8, 1, 4, 2)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "topreid", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train" in proc.stdout and "gradcheck" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "topreid", "eval"], capture_output=True, text=True)
    assert proc.returncode != 0
