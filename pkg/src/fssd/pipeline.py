"""End-to-end commands: train, fit, eval, sweep, probe and score.

All artifacts of a run live in one output directory::

    split.csv            portion,index   (train / val_in / val_ood / test_in / test_ood)
    model.ckpt           final checkpoint
    snapshots/*.ckpt     training snapshots (step 0 first)
    train_log.csv        step,loss,accuracy
    detectors.bin        fitted detectors
    fit.csv              method,key,value
    eval.csv, histograms.csv, scores.csv
    sweep.csv
    trajectories.csv, speeds.csv, kernel.csv, movement.csv, probe_summary.csv
    config.<command>.txt resolved configuration of each command

Commands before ``eval``/``sweep`` only ever see the train and validation
portions; the split manifest is the single source of portion indices.
"""

import csv
import logging
import os
from pathlib import Path

import numpy as np

from fssd import detectors as D
from fssd.checkpoint import load_checkpoint, load_checkpoint_full, save_checkpoint
from fssd.config import ConfigError
from fssd.data import (
    CorruptionSpec,
    OoDPair,
    blob_means,
    gen_blobs,
    gen_ood_ring,
    load_idx,
    make_pair,
    read_csv_inputs,
    read_idx_images,
)
from fssd.ensemble import C_GRID
from fssd.evaluation import eval_all, robustness_sweep, write_histograms_csv, write_reports_csv, write_sweep_csv
from fssd.models import ModelConfig, build_model, forward_features, penultimate_tap
from fssd.probe import (
    feature_trajectory,
    moving_speed,
    movement_vs_fssd,
    ntk_gram,
    write_rows_csv,
    write_trajectories_csv,
)
from fssd.trainer import TrainConfig, train, write_training_log

log = logging.getLogger(__name__)

PORTIONS = ("train", "val_in", "val_ood", "test_in", "test_ood")
TEST_PORTIONS = ("test_in", "test_ood")


class ContaminationError(RuntimeError):
    pass


# ---------------------------------------------------------------- data sources

def _limit(cfg, key):
    n = cfg.get_int(key)
    return n if n > 0 else None


def load_pools(cfg):
    """The three source pools: ``train``, ``in`` (val+test) and ``ood`` (val+test)."""
    seed = cfg.get_int("seed")
    source = cfg.get("data.source")
    if source == "synthetic":
        d, C = cfg.get_int("data.dim"), cfg.get_int("data.classes")
        amp, spread = cfg.get_float("data.amplitude"), cfg.get_float("data.spread")
        means = blob_means(C, d, amp, seed + 100, antipodal=bool(cfg.get_int("data.antipodal")))
        radius = cfg.get_float("data.ring_scale") * np.sqrt(d * (amp ** 2 + spread ** 2))
        return {
            "train": gen_blobs(cfg.get_int("data.n_train"), means, spread, seed + 1, "blobs/train"),
            "in": gen_blobs(cfg.get_int("data.n_in"), means, spread, seed + 2, "blobs"),
            "ood": gen_ood_ring(cfg.get_int("data.n_ood"), radius, seed + 3, dim=d, name="ring"),
        }
    if source == "idx":
        pools = {}
        for pool, prefix in (("train", "train"), ("in", "in"), ("ood", "ood")):
            images, labels = cfg.get(f"data.{prefix}_images"), cfg.get(f"data.{prefix}_labels")
            if not images or not labels:
                raise ConfigError(f"data.source = idx needs data.{prefix}_images and data.{prefix}_labels")
            for path in (images, labels):
                if not os.path.exists(path):
                    raise FileNotFoundError(f"IDX file not found: {path}")
            pools[pool] = load_idx(images, labels, name=pool, limit=_limit(cfg, f"data.{prefix}_limit"))
        return pools
    raise ConfigError(f"data.source must be synthetic or idx, got {source!r}")


def make_manifest(cfg, pools):
    pair = make_pair(pools["in"], pools["ood"], cfg.get_int("data.n_val"), cfg.get_int("seed") + 4)
    manifest = {"train": np.arange(len(pools["train"]))}
    manifest.update(pair.index)
    return manifest


def write_manifest(path, manifest):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["portion", "index"])
        for portion in PORTIONS:
            for i in manifest[portion]:
                w.writerow([portion, int(i)])


def read_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"split manifest not found: {path} (run the train command first)")
    rows = {p: [] for p in PORTIONS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["portion", "index"]:
            raise ValueError(f"{path}: expected header portion,index, got {header}")
        for portion, idx in reader:
            if portion not in rows:
                raise ValueError(f"{path}: unknown portion {portion!r}")
            rows[portion].append(int(idx))
    manifest = {p: np.array(v, dtype=np.int64) for p, v in rows.items()}
    for side in ("in", "ood"):
        overlap = np.intersect1d(manifest[f"val_{side}"], manifest[f"test_{side}"])
        if overlap.size:
            raise ContaminationError(
                f"{path}: {overlap.size} {side} samples are listed in both val_{side} and test_{side}")
    return manifest


class Portions:
    """Manifest-backed access to data portions, refusing test data unless allowed."""

    def __init__(self, cfg, manifest, allow_test=False):
        self.cfg = cfg
        self.manifest = manifest
        self.allow_test = allow_test
        self._pools = None

    def pools(self):
        if self._pools is None:
            self._pools = load_pools(self.cfg)
        return self._pools

    def get(self, portion):
        if portion in TEST_PORTIONS and not self.allow_test:
            raise ContaminationError(f"test portion {portion!r} requested before evaluation")
        pool = "train" if portion == "train" else portion.split("_")[1]
        data = self.pools()[pool]
        idx = self.manifest[portion]
        if idx.size and idx.max() >= len(data):
            raise ValueError(f"split manifest indexes {portion} sample {idx.max()} but the pool has {len(data)}")
        return _fit_to_model_input(self.cfg, data.subset(idx, f"{data.name}/{portion}"))

    def pair(self):
        return OoDPair(self.get("test_in"), self.get("test_ood"), self.get("val_in"), self.get("val_ood"),
                       index={k: self.manifest[k] for k in ("val_in", "val_ood", "test_in", "test_ood")})


def _fit_to_model_input(cfg, data):
    if cfg.get("model.architecture") == "mlp":
        return data.reshaped((int(np.prod(data.inputs.shape[1:])),))
    shape = cfg.get_ints("model.input_shape")
    return data.reshaped(shape)


# ---------------------------------------------------------------- model + run dir

def model_config(cfg, input_dim=None):
    seed = cfg.get_int("seed") + 5
    classes = cfg.get_int("data.classes")
    if cfg.get("model.architecture") == "mlp":
        d = input_dim if input_dim is not None else cfg.get_int("data.dim")
        return ModelConfig("mlp", layer_sizes=(d,) + cfg.get_ints("model.hidden") + (classes,), seed=seed)
    return ModelConfig(
        "lenet",
        input_shape=cfg.get_ints("model.input_shape"),
        conv_channels=cfg.get_ints("model.conv_channels"),
        kernel_size=cfg.get_int("model.kernel_size"),
        padding=cfg.get_int("model.padding"),
        pool=cfg.get_int("model.pool"),
        fc_sizes=cfg.get_ints("model.fc_sizes"),
        num_classes=classes,
        seed=seed,
    )


def train_config(cfg):
    return TrainConfig(
        learning_rate=cfg.get_float("train.learning_rate"),
        momentum=cfg.get_float("train.momentum"),
        batch_size=cfg.get_int("train.batch_size"),
        epochs=cfg.get_int("train.epochs"),
        snapshot_every=cfg.get_int("train.snapshot_every"),
        seed=cfg.get_int("seed") + 6,
    )


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.get("out"))

    def path(self, name):
        return self.out / name

    def require(self, name, hint):
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact {p} (run the {hint} command first)")
        return p

    def start(self, command):
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.write(self.path(f"config.{command}.txt"))

    def model(self):
        return load_checkpoint(self.require("model.ckpt", "train"))

    def snapshots(self):
        snap_dir = self.require("snapshots", "train")
        files = sorted(snap_dir.glob("step_*.ckpt"))
        if not files:
            raise FileNotFoundError(f"no snapshots in {snap_dir}")
        return [load_checkpoint_full(f) for f in files]

    def detectors(self):
        return D.load_detectors(self.require("detectors.bin", "fit"))

    def portions(self, allow_test=False):
        return Portions(self.cfg, read_manifest(self.require("split.csv", "train")), allow_test)


# ---------------------------------------------------------------- commands

def cmd_train(cfg):
    run = Run(cfg)
    run.start("train")
    pools = load_pools(cfg)
    manifest = make_manifest(cfg, pools)
    write_manifest(run.path("split.csv"), manifest)
    data = Portions(cfg, manifest).get("train")
    model = build_model(model_config(cfg, data.inputs.shape[1] if data.inputs.ndim == 2 else None))
    result = train(model, data, train_config(cfg))
    snap_dir = run.path("snapshots")
    snap_dir.mkdir(exist_ok=True)
    for old in snap_dir.glob("step_*.ckpt"):
        old.unlink()
    for snap in result.snapshots:
        save_checkpoint(snap, snap_dir / f"step_{snap.step:08d}.ckpt")
    save_checkpoint(result.snapshots[-1], run.path("model.ckpt"))
    write_training_log(result.log, run.path("train_log.csv"))
    log.info("trained %d steps, final loss %.4g", result.snapshots[-1].step, result.log[-1][1])
    return result


def _detector_grids(cfg):
    return dict(
        eps_grid=cfg.get_floats("detector.eps_grid"),
        c_grid=cfg.get_floats("detector.c_grid") or C_GRID,
    )


def cmd_fit(cfg):
    run = Run(cfg)
    model = run.model()
    portions = run.portions()
    run.start("fit")
    val_in, val_ood = portions.get("val_in").inputs, portions.get("val_ood").inputs
    grids = _detector_grids(cfg)
    seed = cfg.get_int("seed")
    noise = cfg.get_int("detector.noise_count")
    mode = cfg.get("detector.mode")
    pen = penultimate_tap(model)
    fssd = D.fit_fssd(model, val_in, val_ood, noise_count=noise, seed=seed + 7, mode=mode, taps=[pen], **grids)
    fssd.name = "FSSD"
    ensem = D.fit_fssd(model, val_in, val_ood, noise_count=noise, seed=seed + 7, mode=mode, **grids)
    ensem.name = "FSSD-Ensem"
    odin = D.fit_odin(model, val_in, val_ood, temperatures=cfg.get_floats("detector.temperatures"),
                      eps_grid=grids["eps_grid"])
    train_data = portions.get("train")
    limit = cfg.get_int("detector.maha_train_limit")
    if limit > 0:
        train_data = train_data.subset(np.arange(min(limit, len(train_data))))
    maha = D.fit_maha(model, train_data, val_in, val_ood, seed=seed, **grids)
    dets = [D.BaseDetector(), odin, maha, fssd, ensem]
    D.save_detectors(run.path("detectors.bin"), dets)
    rows = [("ODIN", "temperature", odin.temperature), ("ODIN", "epsilon", odin.epsilon)]
    for det in (maha, fssd, ensem):
        rows.append((det.name, "epsilon", det.epsilon))
        rows += [(det.name, f"alpha[{tap}]", float(a)) for tap, a in zip(det.taps, det.weights)]
        rows.append((det.name, "bias", det.bias))
    write_rows_csv(["method", "key", "value"], rows, run.path("fit.csv"))
    return dets


def cmd_eval(cfg):
    run = Run(cfg)
    model, dets = run.model(), run.detectors()
    pair = run.portions(allow_test=True).pair()
    run.start("eval")
    reports = eval_all(pair, model, dets)
    write_reports_csv(reports, run.path("eval.csv"))
    write_histograms_csv(reports, run.path("histograms.csv"))
    rows = []
    ids = [f"in/{i}" for i in pair.index["test_in"]] + [f"ood/{i}" for i in pair.index["test_ood"]]
    for r in reports:
        combined = np.r_[r.scores_in, r.scores_ood]
        rows += [(sid, r.method, "combined", s) for sid, s in zip(ids, combined)]
        for k, tap in enumerate(r.layer_names):
            col = np.r_[r.layers_in[:, k], r.layers_ood[:, k]]
            rows += [(sid, r.method, tap, s) for sid, s in zip(ids, col)]
    D.write_scores_csv(run.path("scores.csv"), rows)
    return reports


def cmd_sweep(cfg):
    run = Run(cfg)
    model, dets = run.model(), run.detectors()
    pair = run.portions(allow_test=True).pair()
    run.start("sweep")
    ladders = {"gaussian": cfg.get_floats("sweep.gaussian_sigmas"), "impulse": cfg.get_floats("sweep.impulse_probs")}
    try:
        specs = [CorruptionSpec(k, lvl, ladders.get(k)) for k in cfg.get_strs("sweep.kinds")
                 for lvl in cfg.get_ints("sweep.levels")]
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from None
    rows = robustness_sweep(pair, model, dets, specs, seed=cfg.get_int("seed") + 8)
    write_sweep_csv(rows, run.path("sweep.csv"))
    return rows


def cmd_probe(cfg):
    """Dynamics probe on validation samples (the test portions are not touched)."""
    run = Run(cfg)
    snaps = run.snapshots()
    portions = run.portions()
    run.start("probe")
    final = snaps[-1].to_model()
    tap = cfg.get("probe.tap") or penultimate_tap(final)
    n = cfg.get_int("probe.samples")
    x_in, x_ood = portions.get("val_in").inputs[:n], portions.get("val_ood").inputs[:n]
    samples = np.concatenate([x_in, x_ood])
    population = ["in"] * len(x_in) + ["ood"] * len(x_ood)
    train_data = portions.get("train")
    nb = min(cfg.get_int("probe.speed_batch"), len(train_data))
    batch = (train_data.inputs[:nb], train_data.labels[:nb])
    seed, noise = cfg.get_int("seed") + 7, cfg.get_int("detector.noise_count")

    write_trajectories_csv(feature_trajectory(snaps, tap, samples), run.path("trajectories.csv"), population)

    speed_rows, mean_speed = [], {}
    for snap in snaps:
        sp = moving_speed(snap.to_model(), batch, samples, tap)
        speed_rows += [(int(snap.step), i, population[i], float(v)) for i, v in enumerate(sp)]
        mean_speed[snap.step] = (float(sp[: len(x_in)].mean()), float(sp[len(x_in):].mean()))
    write_rows_csv(["step", "sample", "population", "speed"], speed_rows, run.path("speeds.csv"))

    k = cfg.get_int("probe.kernel_samples")
    kx = np.concatenate([x_in[: (k + 1) // 2], x_ood[: k // 2]])
    K = ntk_gram(final, kx, tap)
    write_rows_csv(["i", "j", "value"], [(i, j, float(K[i, j])) for i in range(len(kx)) for j in range(len(kx))],
                   run.path("kernel.csv"))

    fss_final = D.estimate_fss(final, noise, seed=seed)[tap]
    moves = movement_vs_fssd(snaps, fss_final, samples, tap)
    write_rows_csv(["sample", "population", "fssd", "movement", "abs_diff"],
                   [(i, population[i], a, b, c) for i, a, b, c in moves], run.path("movement.csv"))

    def ratio(model):
        fss = D.estimate_fss(model, noise, seed=seed)[tap]
        f = np.linalg.norm(forward_features(model, samples)[tap] - fss, axis=1)
        return float(f[: len(x_in)].mean() / f[len(x_in):].mean())

    moves = np.array([(a, b) for _, a, b, _ in moves])
    steps = sorted(mean_speed)
    mid = steps[int(np.argmin([abs(s - steps[-1] / 2) for s in steps]))]
    summary = [
        ("tap", tap),
        ("init_ratio", ratio(snaps[0].to_model())),
        ("final_ratio", ratio(final)),
        ("pearson_fssd_movement", float(np.corrcoef(moves[:, 0], moves[:, 1])[0, 1])),
        ("mid_step", int(mid)),
        ("mid_speed_in", mean_speed[mid][0]),
        ("mid_speed_ood", mean_speed[mid][1]),
        ("kernel_min_eigenvalue", float(np.linalg.eigvalsh(0.5 * (K + K.T)).min())),
    ]
    write_rows_csv(["quantity", "value"], summary, run.path("probe_summary.csv"))
    return dict(summary)


def load_inputs(path, model):
    """Samples from a CSV (one column per input value) or an IDX image file."""
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"input file not found: {path}")
    if path.endswith(".csv"):
        x = read_csv_inputs(path)
    else:
        x = read_idx_images(path).astype(np.float64) / 255.0
    per_sample = int(np.prod(model.input_shape))
    if len(x) and x[0].size != per_sample:
        raise ValueError(f"{path}: {x[0].size} values per sample, the model expects {per_sample}")
    x = x.reshape((len(x),) + tuple(model.input_shape))
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{path}: input values must lie in [0, 1]")
    return x


def cmd_score(cfg, input_file, output=None):
    run = Run(cfg)
    model, dets = run.model(), run.detectors()
    x = load_inputs(input_file, model)
    run.start("score")
    rows = []
    for det in dets:
        if hasattr(det, "layer_scores"):
            S = det.layer_scores(model, x)
            rows += [(i, det.name, "combined", s) for i, s in enumerate(S @ det.weights + det.bias)]
            for k, tap in enumerate(det.taps):
                rows += [(i, det.name, tap, s) for i, s in enumerate(S[:, k])]
        else:
            rows += [(i, det.name, "combined", s) for i, s in enumerate(det.score(model, x))]
    out = Path(output) if output else run.path(f"score_{Path(input_file).stem}.csv")
    D.write_scores_csv(out, rows)
    return out


COMMANDS = {
    "train": cmd_train,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
}

