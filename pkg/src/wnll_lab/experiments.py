"""Experiment drivers: defence sweeps, transfer matrices, feature export, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as mdl
from .attacks import AttackConfig, BudgetViolation, GradientOracle, run_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, gen_synthetic, gen_synthetic_images, load_cifar10, substream, train_test_split
from .training import AUGMENTATIONS, TrainConfig, augment_dataset, pgd_adv_train, standard_train, train_alternating
from .tvm import TvmConfig, apply_tvm_batch

TASKS = ("train", "attack", "defend", "transfer", "export-features", "sweep")
SOURCES = ("cifar10", "synthetic-images", "blobs", "moons")
ATTACKS = ("fgsm", "ifgsm", "cw")
HEADS = ("linear", "wnll")
REPORT_COLUMNS = ("attack", "mode", "head", "epsilon", "clean_acc", "adv_acc", "tvm_adv_acc", "linf_max", "seed")
EPS_GRID = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)


class ConfigError(ValueError):
    pass


class MissingCheckpoint(ConfigError):
    pass


@dataclass(frozen=True)
class DataSpec:
    """Where the images come from and how many per class."""

    source: str = "synthetic-images"
    path: str | None = None
    class_subset: tuple = (0, 1)
    per_class_cap: int = 500
    test_per_class: int = 100
    noise: float = 0.1  # blobs / moons only


@dataclass
class ExperimentConfig:
    task: str = "sweep"
    data: DataSpec = field(default_factory=DataSpec)
    model_spec: str = "tiny_cnn"
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: tuple = ("fgsm", "ifgsm")
    epsilons: tuple = EPS_GRID
    attack: AttackConfig = field(default_factory=AttackConfig)
    tvm: TvmConfig = field(default_factory=TvmConfig)
    heads: tuple = HEADS
    modes: tuple = ("original",)
    template_size: int = 100
    k: int = mdl.DEFAULT_K
    transfer_tvm: bool = False
    checkpoints: dict = field(default_factory=dict)
    output_dir: str = "out"
    seed: int = 0

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.data.source not in SOURCES:
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.data.source == "cifar10":
            if not self.data.path or not os.path.exists(self.data.path):
                raise ConfigError(f"CIFAR-10 path {self.data.path!r} does not exist")
        eps = list(self.epsilons)
        if eps != sorted(eps) or any(e < 0 for e in eps):
            raise ConfigError(f"epsilons must be non-negative and sorted ascending, got {eps}")
        for a in self.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"unknown attack {a!r}")
        for h in self.heads:
            if h not in HEADS:
                raise ConfigError(f"unknown head {h!r}")
        for m in self.modes:
            if m not in AUGMENTATIONS:
                raise ConfigError(f"unknown training-data mode {m!r}")
        for key, path in self.checkpoints.items():
            if not os.path.exists(path):
                raise ConfigError(f"checkpoint {key} -> {path!r} does not exist")
        try:
            mdl.get_spec(self.model_spec, len(self.data.class_subset))
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        nested = {"data": DataSpec, "train": TrainConfig, "attack": AttackConfig, "tvm": TvmConfig}
        try:
            for key, typ in nested.items():
                if key in d and not isinstance(d[key], typ):
                    sub = dict(d[key])
                    bad = set(sub) - {f.name for f in fields(typ)}
                    if bad:
                        raise ConfigError(f"unknown {key} keys {sorted(bad)}")
                    sub = {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}
                    d[key] = typ(**sub)
            for key in ("attacks", "epsilons", "heads", "modes"):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def config_hash(self):
        """SHA-256 of the canonical config, ignoring the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def n_classes(self):
        return len(self.data.class_subset)


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    wall_time: float | None = None

    def validate(self):
        for r in self.rows:
            for key in ("clean_acc", "adv_acc", "tvm_adv_acc"):
                v = r.get(key)
                if v is not None and not 0.0 <= v <= 1.0:
                    raise BudgetViolation(f"{key} = {v} outside [0, 1]")
            if r["attack"] != "cw" and r["linf_max"] > r["epsilon"] + 1e-12:
                raise BudgetViolation(f"l-inf audit {r['linf_max']:.3e} exceeds epsilon {r['epsilon']}")
        return self


# data and models

def load_data(config):
    """``(train, test, sample_indices)`` for the configured source."""
    spec = config.data
    seed = config.seed
    m = config.n_classes
    if spec.source == "cifar10":
        kw = dict(class_subset=spec.class_subset)
        if os.path.isdir(spec.path):
            train, tr_idx = load_cifar10(spec.path, per_class_cap=spec.per_class_cap, split="train",
                                         return_indices=True, **kw)
            test, te_idx = load_cifar10(spec.path, per_class_cap=spec.test_per_class, split="test",
                                        return_indices=True, **kw)
            return train, test, {"train": tr_idx.tolist(), "test": te_idx.tolist()}
        full, idx = load_cifar10(spec.path, per_class_cap=spec.per_class_cap + spec.test_per_class,
                                 return_indices=True, **kw)
    elif spec.source == "synthetic-images":
        full = gen_synthetic_images((spec.per_class_cap + spec.test_per_class) * m, seed=seed, n_classes=m)
        idx = np.arange(len(full))
    else:
        if m != 2:
            raise ConfigError(f"{spec.source} data has exactly 2 classes")
        full = gen_synthetic(spec.source, (spec.per_class_cap + spec.test_per_class) * 2, spec.noise, seed)
        idx = np.arange(len(full))
    train, test, tr_pos, te_pos = train_test_split(full, spec.test_per_class, seed, return_indices=True)
    return train, test, {"train": idx[tr_pos].tolist(), "test": idx[te_pos].tolist()}


def reserve_eval_template(config, train):
    return mdl.reserve_template(train, config.template_size, substream(config.seed, "template"))[0]


def train_model(config, head, mode, train, template=None):
    """Train one (head, training-data mode) model; returns ``(model, log)``.

    The linear head is trained for the same total number of epochs as the
    WNLL schedule, all of them linear-phase epochs. With ``ifgsm_iters > 0``
    both heads get PGD training.
    """
    tc = replace(config.train, seed=config.seed, k=config.k, template_size=config.template_size)
    data = augment_dataset(train, mode, config.tvm, config.seed)
    model = mdl.TwoBranchModel(mdl.get_spec(config.model_spec, config.n_classes), seed=config.seed)
    if head == "linear":
        per_alt = tc.epochs_linear + tc.epochs_wnll
        if tc.ifgsm_iters:
            log = pgd_adv_train(model, data, replace(tc, epochs_linear=per_alt, epochs_wnll=0))
        else:
            log = standard_train(model, data, replace(tc, epochs_linear=per_alt * tc.alternations))
    elif tc.ifgsm_iters:
        log = pgd_adv_train(model, data, tc)
    else:
        log = train_alternating(model, data, tc, template=template)
    return model, log


def checkpoint_key(head, mode):
    return f"{head}:{mode}"


def train_checkpoints(config, train=None):
    """Train every (head, mode) model and save checkpoints under ``output_dir``."""
    if train is None:
        train = load_data(config)[0]
    template = reserve_eval_template(config, train)
    os.makedirs(config.output_dir, exist_ok=True)
    paths = {}
    for mode in config.modes:
        for head in config.heads:
            model, log = train_model(config, head, mode, train, template)
            path = os.path.join(config.output_dir, f"ckpt_{head}_{mode}.bin")
            save_checkpoint(model, path, seed=config.seed, epoch=len(log.epochs))
            with open(os.path.join(config.output_dir, f"trainlog_{head}_{mode}.json"), "w") as fh:
                fh.write(log.to_json())
            paths[checkpoint_key(head, mode)] = path
    return paths


def _load_model(config, head, mode):
    key = checkpoint_key(head, mode)
    if key not in config.checkpoints:
        raise MissingCheckpoint(f"no checkpoint for {key}")
    spec = mdl.get_spec(config.model_spec, config.n_classes).name
    return load_checkpoint(config.checkpoints[key], expected_spec=spec)[0]


# evaluation

def _oracle(config, model, head, template):
    return GradientOracle(model, head, template if head == "wnll" else None, k=config.k)


def _accuracy(pred, y):
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


def _craft(config, oracle, attack, eps, test):
    batch = run_attack(attack, oracle, test.x, test.y, replace(config.attack, epsilon=float(eps)))
    linf = float(np.max(np.abs(batch.perturbed - test.x))) if len(test) else 0.0
    if attack != "cw" and linf > eps + 1e-12:
        raise BudgetViolation(f"{attack} at eps={eps}: l-inf {linf:.3e} exceeds budget")
    return batch.perturbed, linf


def _row(attack, mode, head, eps, clean, adv, tvm_adv, linf, seed):
    return {"attack": attack, "mode": mode, "head": head, "epsilon": float(eps), "clean_acc": clean,
            "adv_acc": adv, "tvm_adv_acc": tvm_adv, "linf_max": linf, "seed": int(seed)}


def _metadata(config, indices, extra=None):
    md = {"config_hash": config.config_hash(), "seed": config.seed, "task": config.task,
          "config": config.to_dict(), "sample_indices": indices}
    md.update(extra or {})
    return md


def _evaluate(config, data, with_tvm):
    config.validate()
    t0 = time.perf_counter()
    train, test, indices = load_data(config) if data is None else data
    template = reserve_eval_template(config, train)
    rows = []
    for attack in config.attacks:
        for mode in config.modes:
            for head in config.heads:
                oracle = _oracle(config, _load_model(config, head, mode), head, template)
                clean = _accuracy(oracle.predict(test.x), test.y)
                for eps in config.epsilons:
                    x_adv, linf = _craft(config, oracle, attack, eps, test)
                    adv = _accuracy(oracle.predict(x_adv), test.y)
                    tvm_adv = None
                    if with_tvm:
                        x_tvm = apply_tvm_batch(x_adv, config.tvm, config.seed)
                        tvm_adv = _accuracy(oracle.predict(x_tvm), test.y)
                    rows.append(_row(attack, mode, head, eps, clean, adv, tvm_adv, linf, config.seed))
    report = ExperimentReport(rows, _metadata(config, indices), time.perf_counter() - t0)
    return report.validate()


def run_attack_eval(config, data=None):
    """Adversarial accuracy per (attack, mode, head, epsilon) without the TVM column."""
    return _evaluate(config, data, with_tvm=False)


def run_defense_sweep(config, data=None):
    """Adversarial and TVM-defended accuracy per (attack, mode, head, epsilon).

    Every (head, mode) pair needs an entry in ``config.checkpoints``.
    """
    return _evaluate(config, data, with_tvm=True)


def run_tvm_eval(config, data=None):
    """Clean versus TVM-reconstructed test accuracy per (mode, head)."""
    config.validate()
    t0 = time.perf_counter()
    train, test, indices = load_data(config) if data is None else data
    template = reserve_eval_template(config, train)
    x_tvm = apply_tvm_batch(test.x, config.tvm, config.seed)
    rows = []
    for mode in config.modes:
        for head in config.heads:
            oracle = _oracle(config, _load_model(config, head, mode), head, template)
            clean = _accuracy(oracle.predict(test.x), test.y)
            tvm_acc = _accuracy(oracle.predict(x_tvm), test.y)
            rows.append(_row("none", mode, head, 0.0, clean, clean, tvm_acc, 0.0, config.seed))
    report = ExperimentReport(rows, _metadata(config, indices), time.perf_counter() - t0)
    return report.validate()


def run_transfer_eval(config, data=None):
    """Mutual accuracy: examples crafted on one head, classified by the other.

    The ``head`` column reads ``source->target``; ``clean_acc`` is the
    target head's clean accuracy.
    """
    config.validate()
    t0 = time.perf_counter()
    train, test, indices = load_data(config) if data is None else data
    template = reserve_eval_template(config, train)
    rows = []
    for mode in config.modes:
        oracles = {h: _oracle(config, _load_model(config, h, mode), h, template) for h in HEADS}
        clean = {h: _accuracy(o.predict(test.x), test.y) for h, o in oracles.items()}
        for attack in config.attacks:
            for src, dst in (("linear", "wnll"), ("wnll", "linear")):
                for eps in config.epsilons:
                    x_adv, linf = _craft(config, oracles[src], attack, eps, test)
                    mutual = _accuracy(oracles[dst].predict(x_adv), test.y)
                    tvm_adv = None
                    if config.transfer_tvm:
                        x_tvm = apply_tvm_batch(x_adv, config.tvm, config.seed)
                        tvm_adv = _accuracy(oracles[dst].predict(x_tvm), test.y)
                    rows.append(_row(attack, mode, f"{src}->{dst}", eps, clean[dst], mutual, tvm_adv, linf,
                                     config.seed))
    report = ExperimentReport(rows, _metadata(config, indices), time.perf_counter() - t0)
    return report.validate()


# feature export

@dataclass
class FeatureExport:
    columns: tuple
    values: np.ndarray
    labels: np.ndarray
    tags: list
    explained_variance: np.ndarray | None = None


def pca2(feats):
    """Top-2 principal components with the first nonzero loading made positive.

    Returns ``(projection, components, eigenvalues)``; components are columns.
    """
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("PCA needs at least 2 points")
    if x.shape[1] < 2:
        raise ValueError("PCA to 2 components needs at least 2 feature dimensions")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:2]
    vals, vecs = vals[order], vecs[:, order]
    for j in range(2):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)
        if len(nz) and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    return xc @ vecs, vecs, vals


def export_features(model, data, mode="pca2", tags=None):
    """Buffer-block features of ``data``, raw or projected to 2-D."""
    if len(data) < 2:
        raise ValueError("feature export needs at least 2 points")
    feats = np.concatenate([mdl.features(model, data.x[s:s + 256]) for s in range(0, len(data), 256)])
    tags = list(tags) if tags is not None else ["all"] * len(data)
    if mode == "pca2":
        proj, _, vals = pca2(feats)
        return FeatureExport(("pc1", "pc2"), proj, data.y.copy(), tags, vals)
    if mode == "raw":
        return FeatureExport(tuple(f"f{i}" for i in range(feats.shape[1])), feats, data.y.copy(), tags)
    raise ValueError(f"unknown export mode {mode!r}")


def write_features(export, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(export.columns) + ["label", "split"])
        for vals, lab, tag in zip(export.values, export.labels, export.tags):
            w.writerow([repr(float(v)) for v in vals] + [int(lab), tag])


# report files

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def emit_report(report, out_dir, name="report"):
    """Write ``<name>.csv`` and ``<name>.meta.json``; wall time goes to ``<name>.timing.json``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, f"{name}.csv"), os.path.join(out_dir, f"{name}.meta.json")]
    with open(paths[0], "w", newline="") as fh:
        fh.write(report_csv(report))
    with open(paths[1], "w") as fh:
        fh.write(json.dumps(report.metadata, sort_keys=True, indent=1) + "\n")
    if report.wall_time is not None:
        paths.append(os.path.join(out_dir, f"{name}.timing.json"))
        with open(paths[2], "w") as fh:
            fh.write(json.dumps({"wall_time_s": report.wall_time}) + "\n")
    return paths


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# sample dumps

def write_ppm(path, image):
    """Binary PPM (P6) from a 3xHxW image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got {img.shape}")
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = map(int, parts[1].split())
    px = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def dump_samples(oracle, data, attack, eps, config, out_dir, count=4):
    """Original / adversarial / TVM triples as PPM files; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    sub = Dataset(data.x[:count], data.y[:count], data.n_classes)
    x_adv, _ = _craft(config, oracle, attack, eps, sub)
    x_tvm = apply_tvm_batch(x_adv, config.tvm, config.seed)
    paths = []
    for i in range(len(sub)):
        for tag, img in (("orig", sub.x[i]), ("adv", x_adv[i]), ("tvm", x_tvm[i])):
            p = os.path.join(out_dir, f"sample{i:03d}_{tag}.ppm")
            write_ppm(p, img)
            paths.append(p)
    return paths
