import os

import numpy as np
import pytest

from ascpool.cli import CONFIG_DEFAULTS, RunConfig, UsageError, dispatch
from ascpool.data import Dataset, FeatureMatrix, Segment, write_feature_matrix, write_manifest
from ascpool.harness import read_submission, score_submission

CLASSES = ("beach", "metro", "park")


def _corpus(root, name, n_locs=6, per_loc=4, labeled=True, seed=0, shift=0):
    """Small class-separable ASCF corpus: each class lifts a different band."""
    rng = np.random.default_rng(seed)
    feat_dir = root / "features"
    feat_dir.mkdir(exist_ok=True)
    segs = []
    for loc in range(n_locs):
        for k in range(per_loc):
            c = (loc + k) % len(CLASSES)
            m = rng.normal(0.0, 0.3, size=(6, 20))
            m[2 * c : 2 * c + 2] += 2.0
            sid = f"{name}{loc}_{k}"
            ref = f"features/{sid}.ascf"
            write_feature_matrix(FeatureMatrix(m), root / ref)
            label = CLASSES[c] if labeled else None
            segs.append(Segment(sid, f"{name}rec{loc + shift}_{k // 2}", f"loc{loc + shift}", label, ref))
    path = root / f"{name}.csv"
    write_manifest(Dataset.from_segments(segs), path)
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return {
        "root": root,
        "train": _corpus(root, "tr", seed=0),
        "test": _corpus(root, "te", n_locs=3, seed=1, shift=10),
        "unl": _corpus(root, "un", n_locs=3, labeled=False, seed=2, shift=20),
    }


def _files_under(path):
    return {os.path.join(d, f) for d, _, fs in os.walk(path) for f in fs}


# ---- dispatch basics -----------------------------------------------------------


def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_subcommand_exits_two():
    assert dispatch(["frobnicate"]) == 2


def test_no_subcommand_exits_two():
    assert dispatch([]) == 2


def test_subcommand_help():
    for cmd in ("train", "score", "ablation"):
        assert dispatch([cmd, "--help"]) == 0


def test_score_fixture(tmp_path, capsys):
    (tmp_path / "t.csv").write_text(
        "segment_id,scene_label,subset\na,bus,public\nb,car,public\nc,bus,private\nd,car,private\n"
    )
    (tmp_path / "s.csv").write_text("segment_id,scene_label\na,bus\nb,bus\nc,car\nd,car\n")
    assert dispatch(["score", "--submission", str(tmp_path / "s.csv"), "--truth", str(tmp_path / "t.csv")]) == 0
    truth = {"a": "bus", "b": "car", "c": "bus", "d": "car"}
    oracle = score_submission(read_submission(tmp_path / "s.csv"), truth, truth)
    assert capsys.readouterr().out.strip() == f"accuracy,{oracle:.4f}" == "accuracy,0.5000"


def test_score_missing_id_is_domain_error(tmp_path):
    (tmp_path / "t.csv").write_text("segment_id,scene_label,subset\na,bus,public\nb,car,private\n")
    (tmp_path / "s.csv").write_text("segment_id,scene_label\na,bus\n")
    assert dispatch(["score", "--submission", str(tmp_path / "s.csv"), "--truth", str(tmp_path / "t.csv")]) == 1


# ---- config --------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\nseed = 7\nmixup = yes\nbase_lr = 0.05\n\narch = mlp\n")
    cfg = RunConfig.resolve(str(tmp_path / "run.cfg"), ["seed=9"])
    assert cfg["seed"] == 9 and cfg["mixup"] is True and cfg["base_lr"] == 0.05 and cfg["arch"] == "mlp"
    back = tmp_path / "echo.cfg"
    back.write_text(cfg.dump())
    assert RunConfig.resolve(str(back)).values == cfg.values
    assert set(cfg.values) == set(CONFIG_DEFAULTS)


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "bad.cfg").write_text("learning_rate = 0.1\n")
    with pytest.raises(UsageError, match="learning_rate"):
        RunConfig.resolve(str(tmp_path / "bad.cfg"))
    with pytest.raises(UsageError):
        RunConfig.resolve(None, ["epochs=many"])
    assert dispatch(["score", "--submission", "x", "--truth", "y", "--set", "nope=1"]) == 2


def test_missing_manifest_is_usage_error(tmp_path):
    assert dispatch(["train", "--out", str(tmp_path / "o")]) == 2


# ---- end-to-end smoke ------------------------------------------------------------


FAST = ["--set", "epochs=15", "--set", "base_lr=0.05", "--set", "batch_size=8"]


def test_train_predict_fuse(corpus, tmp_path, capsys):
    run = tmp_path / "run"
    assert dispatch(["train", "--manifest", str(corpus["train"]), "--out", str(run), *FAST]) == 0
    for name in ("model.ascm", "config.txt", "run.txt", "standardizer.csv", "vocabulary.txt"):
        assert (run / name).exists()
    assert "seed = 0" in (run / "run.txt").read_text()
    assert "version = v" in (run / "run.txt").read_text()
    pred = tmp_path / "pred"
    assert dispatch(["predict", "--model-dir", str(run), "--manifest", str(corpus["test"]), "--out", str(pred)]) == 0
    sub = read_submission(pred / "submission.csv")
    assert len(sub) == 12 and set(sub.values()) <= set(CLASSES)
    fused = tmp_path / "fused"
    probs = str(pred / "probabilities.csv")
    assert dispatch(["fuse", "--probs", probs, probs, "--out", str(fused)]) == 0
    assert read_submission(fused / "submission.csv") == sub
    assert dispatch(["fuse", "--probs", probs, probs, "--set", "fusion=majority", "--out", str(fused)]) == 0
    assert read_submission(fused / "submission.csv") == sub


def test_train_is_reproducible(corpus, tmp_path):
    for name in ("a", "b"):
        assert dispatch(["train", "--manifest", str(corpus["train"]), "--out", str(tmp_path / name), *FAST,
                         "--set", "mixup=true", "--set", "random_erasing=true"]) == 0
    assert (tmp_path / "a" / "model.ascm").read_bytes() == (tmp_path / "b" / "model.ascm").read_bytes()


def test_kfold_command(corpus, tmp_path, capsys):
    out = tmp_path / "kf"
    argv = ["kfold", "--manifest", str(corpus["train"]), "--test-manifest", str(corpus["test"]),
            "--out", str(out), "--set", "folds=3", *FAST]
    assert dispatch(argv) == 0
    assert sorted(p.name for p in out.glob("fold*.ascm")) == ["fold0.ascm", "fold1.ascm", "fold2.ascm"]
    assert (out / "submission.csv").exists()
    assert "oof_accuracy," in capsys.readouterr().out


def test_kfold_too_many_folds_is_domain_error(corpus, tmp_path):
    argv = ["kfold", "--manifest", str(corpus["train"]), "--out", str(tmp_path / "kf"), "--set", "folds=11", *FAST]
    assert dispatch(argv) == 1


def test_ssl_command(corpus, tmp_path):
    out = tmp_path / "ssl"
    argv = ["ssl", "--manifest", str(corpus["train"]), "--unlabeled-manifest", str(corpus["unl"]),
            "--out", str(out), "--set", "ssl_rounds=2", *FAST]
    assert dispatch(argv) == 0
    lines = (out / "rounds.csv").read_text().splitlines()
    assert lines[0] == "round,accepted,total_unlabeled,threshold" and len(lines) == 3


def test_balance_command(corpus, tmp_path, capsys):
    out = tmp_path / "bal"
    argv = ["balance", "--manifest", str(corpus["train"]), "--out", str(out),
            "--set", "balance_dev_target=4", "--set", "balance_eval_target=2",
            "--set", "balance_candidates=8", "--set", "balance_components=1",
            "--set", "balance_window=10", "--set", "balance_hop=5"]
    assert dispatch(argv) == 0
    rows = (out / "split.csv").read_text().splitlines()
    assert rows[0] == "segment_id,set" and len(rows) == 1 + 3 * 6
    assert len((out / "candidates.csv").read_text().splitlines()) == 9


def test_submit_command(corpus, tmp_path, capsys):
    (tmp_path / "t.csv").write_text("segment_id,scene_label,subset\na,bus,public\nb,car,private\n")
    (tmp_path / "s.csv").write_text("segment_id,scene_label\na,bus\nb,bus\n")
    out = tmp_path / "lb"
    base = ["submit", "--submission", str(tmp_path / "s.csv"), "--truth", str(tmp_path / "t.csv"),
            "--team", "owls", "--out", str(out)]
    assert dispatch([*base, "--timestamp", "2024-05-01T10:00:00"]) == 0
    assert capsys.readouterr().out.strip() == "public_score,1.0000"
    assert dispatch([*base, "--timestamp", "2024-05-01T11:00:00"]) == 0
    assert dispatch([*base, "--timestamp", "2024-05-01T23:59:59"]) == 1
    assert dispatch([*base, "--timestamp", "2024-05-02T00:00:00"]) == 0
    assert len((out / "journal.csv").read_text().splitlines()) == 5


def test_outputs_stay_inside_out_dir(corpus, tmp_path):
    before = _files_under(corpus["root"])
    out = tmp_path / "only_here"
    assert dispatch(["train", "--manifest", str(corpus["train"]), "--out", str(out), *FAST]) == 0
    assert _files_under(corpus["root"]) == before
    assert set(os.listdir(tmp_path)) == {"only_here"}


# ---- ablation --------------------------------------------------------------------


def _ablation(corpus, out, mode):
    argv = ["ablation", "--manifest", str(corpus["train"]), "--test-manifest", str(corpus["test"]),
            "--out", str(out), "--set", f"ablation_mode={mode}", "--set", "clr_step_size=5", *FAST]
    assert dispatch(argv) == 0
    return (out / f"ablation_{mode}.csv").read_text()


def test_ablation_augmentation_grid(corpus, tmp_path):
    text = _ablation(corpus, tmp_path / "a", "augmentation")
    lines = text.splitlines()
    assert lines[0] == "combination,clr,random_erasing,mixup,accuracy,delta"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 6
    assert rows[0][:4] == ["baseline", "no", "no", "no"] and float(rows[0][5]) == 0.0
    assert _ablation(corpus, tmp_path / "b", "augmentation") == text


def test_ablation_feature_grid(corpus, tmp_path):
    text = _ablation(corpus, tmp_path / "a", "features")
    lines = text.splitlines()
    assert lines[0] == "method,accuracy,delta"
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["baseline", "temporal_averaging", "background_subtraction", "fusion"]
    assert float(lines[1].split(",")[2]) == 0.0
    assert _ablation(corpus, tmp_path / "b", "features") == text


def test_ablation_unknown_mode(corpus, tmp_path):
    argv = ["ablation", "--manifest", str(corpus["train"]), "--test-manifest", str(corpus["test"]),
            "--out", str(tmp_path / "x"), "--set", "ablation_mode=bogus", *FAST]
    assert dispatch(argv) in (1, 2)
