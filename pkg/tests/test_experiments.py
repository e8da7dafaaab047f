import json
from dataclasses import replace

import numpy as np
import pytest

from wnll_lab import experiments as ex
from wnll_lab import model as mdl
from wnll_lab.attacks import BudgetViolation, GradientOracle
from wnll_lab.training import TrainConfig


def small_config(tmp_path, **kw):
    base = dict(
        data=ex.DataSpec(per_class_cap=12, test_per_class=4),
        train=TrainConfig(alternations=1, epochs_linear=1, epochs_wnll=1, batch_size=8),
        epsilons=(0.0, 0.05),
        template_size=8,
        k=3,
        output_dir=str(tmp_path),
    )
    base.update(kw)
    return ex.ExperimentConfig(**base).validate()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    config = small_config(out)
    data = ex.load_data(config)
    config.checkpoints.update(ex.train_checkpoints(config, data[0]))
    return config, data


def dense_pca(x):
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    v = vt[:2].T
    for j in range(2):
        nz = np.flatnonzero(np.abs(v[:, j]) > 1e-12)
        if v[nz[0], j] < 0:
            v[:, j] = -v[:, j]
    return xc @ v, s[:2] ** 2 / (len(x) - 1)


def test_pca2_matches_svd_oracle():
    x = np.random.default_rng(0).normal(size=(50, 6)) @ np.diag([5, 3, 1, 0.5, 0.2, 0.1])
    proj, comps, vals = ex.pca2(x)
    ref, ref_vals = dense_pca(x)
    np.testing.assert_allclose(proj, ref, atol=1e-8)
    np.testing.assert_allclose(vals, ref_vals, rtol=1e-10)
    np.testing.assert_allclose(comps.T @ comps, np.eye(2), atol=1e-12)


def test_pca2_axis_aligned():
    x = np.zeros((40, 3))
    x[:, 1] = 10 * np.tile([1.0, -1.0], 20)
    x[:, 2] = -np.tile([1.0, 1.0, -1.0, -1.0], 10)
    _, comps, _ = ex.pca2(x)
    np.testing.assert_allclose(np.abs(comps), [[0, 0], [1, 0], [0, 1]], atol=1e-10)
    assert comps[1, 0] > 0 and comps[2, 1] > 0


def test_pca2_duplicate_rows_and_errors():
    x = np.repeat(np.random.default_rng(2).normal(size=(5, 4)), 3, axis=0)
    proj, _, _ = ex.pca2(x)
    np.testing.assert_allclose(proj[0], proj[1], atol=1e-12)
    with pytest.raises(ValueError):
        ex.pca2(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ex.pca2(np.zeros((5, 1)))


def test_export_features_modes():
    data = ex.load_data(ex.ExperimentConfig(data=ex.DataSpec(source="blobs", per_class_cap=10, test_per_class=2),
                                            model_spec="mlp2d"))[0]
    model = mdl.TwoBranchModel(mdl.get_spec("mlp2d", 2), seed=0)
    raw = ex.export_features(model, data, "raw")
    assert raw.values.shape == (len(data), 32)
    p = ex.export_features(model, data, "pca2")
    np.testing.assert_allclose(p.values, ex.pca2(raw.values)[0], atol=1e-12)
    with pytest.raises(ValueError):
        ex.export_features(model, data, "tsne")


def test_emit_report_header_only(tmp_path):
    paths = ex.emit_report(ex.ExperimentReport([], {"a": 1}), tmp_path, "empty")
    assert open(paths[0]).read() == ",".join(ex.REPORT_COLUMNS) + "\n"
    assert len(paths) == 2


def test_emit_report_byte_identical(trained, tmp_path):
    config, data = trained
    r1 = ex.run_attack_eval(config, data)
    r2 = ex.run_attack_eval(config, data)
    p1 = ex.emit_report(r1, tmp_path / "a", "attack")
    p2 = ex.emit_report(r2, tmp_path / "b", "attack")
    for a, b in zip(p1[:2], p2[:2]):
        assert open(a, "rb").read() == open(b, "rb").read()
    assert list(ex.read_report_csv(p1[0])[0]) == list(ex.REPORT_COLUMNS)
    meta = json.load(open(p1[1]))
    assert meta["config_hash"] == config.config_hash()
    assert "wall_time" not in json.dumps(meta)
    assert "wall_time_s" in json.load(open(p1[2]))


def test_sweep_rows_and_eps_zero(trained):
    config, data = trained
    rep = ex.run_defense_sweep(config, data)
    assert len(rep.rows) == len(config.attacks) * len(config.modes) * len(config.heads) * len(config.epsilons)
    for r in rep.rows:
        assert r["tvm_adv_acc"] is not None
        if r["epsilon"] == 0.0:
            assert r["adv_acc"] == r["clean_acc"] and r["linf_max"] == 0.0
        assert r["linf_max"] <= r["epsilon"] + 1e-12
    assert rep.metadata["sample_indices"]["test"] == data[2]["test"]


def test_tvm_eval_rows(trained):
    config, data = trained
    rows = ex.run_tvm_eval(config, data).rows
    assert [(r["attack"], r["head"]) for r in rows] == [("none", "linear"), ("none", "wnll")]


def test_transfer_both_directions(trained):
    config, data = trained
    rows = ex.run_transfer_eval(replace(config, attacks=("fgsm",)), data).rows
    assert {r["head"] for r in rows} == {"linear->wnll", "wnll->linear"}
    assert all(r["tvm_adv_acc"] is None for r in rows)
    zero = [r for r in rows if r["epsilon"] == 0.0]
    assert all(r["adv_acc"] == r["clean_acc"] for r in zero)


def test_missing_checkpoint_named(trained):
    config, data = trained
    partial = replace(config, checkpoints={"linear:original": config.checkpoints["linear:original"]})
    with pytest.raises(ex.MissingCheckpoint, match="wnll:original"):
        ex.run_attack_eval(partial, data)


def test_report_validate_audit():
    row = ex._row("fgsm", "original", "linear", 0.1, 0.9, 0.5, None, 0.2, 0)
    with pytest.raises(BudgetViolation):
        ex.ExperimentReport([row]).validate()
    row = ex._row("fgsm", "original", "linear", 0.1, 0.9, 1.5, None, 0.1, 0)
    with pytest.raises(BudgetViolation):
        ex.ExperimentReport([row]).validate()


def test_config_validation_and_roundtrip(tmp_path):
    cfg = small_config(tmp_path)
    again = ex.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.config_hash() == cfg.config_hash()
    assert replace(cfg, output_dir="elsewhere").config_hash() == cfg.config_hash()
    assert replace(cfg, seed=1).config_hash() != cfg.config_hash()
    for bad in (dict(epsilons=(0.1, 0.0)), dict(attacks=("deepfool",)), dict(heads=("svm",)),
                dict(modes=("mixup",)), dict(checkpoints={"wnll:original": "/nonexistent"}),
                dict(data=ex.DataSpec(source="cifar10", path="/nonexistent"))):
        with pytest.raises(ex.ConfigError):
            small_config(tmp_path, **bad)
    with pytest.raises(ex.ConfigError, match="bogus"):
        ex.ExperimentConfig.from_dict({"bogus": 1})


def test_train_model_epoch_matching(tmp_path):
    cfg = small_config(tmp_path, train=TrainConfig(alternations=2, epochs_linear=2, epochs_wnll=1, batch_size=8))
    train = ex.load_data(cfg)[0]
    _, log = ex.train_model(cfg, "linear", "original", train)
    assert len(log.epochs) == 6 and all(e["phase"] == "linear" for e in log.epochs)
    _, log = ex.train_model(cfg, "wnll", "original", train)
    assert [e["phase"] for e in log.epochs].count("wnll") == 2


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(3, 5, 7)) / 255.0
    ex.write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(ex.read_ppm(tmp_path / "a.ppm"), img, atol=1e-12)
    with pytest.raises(ValueError):
        ex.write_ppm(tmp_path / "b.ppm", np.zeros((1, 4, 4)))


def test_dump_samples(trained, tmp_path):
    config, data = trained
    model = ex._load_model(config, "linear", "original")
    paths = ex.dump_samples(GradientOracle(model), data[1], "fgsm", 0.05, config, tmp_path, count=2)
    assert len(paths) == 6
    orig, adv = ex.read_ppm(paths[0]), ex.read_ppm(paths[1])
    assert np.max(np.abs(orig - adv)) <= 0.05 + 1.5 / 255
