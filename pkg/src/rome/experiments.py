"""Experiment configuration, the case-study pipeline, metric tables and detector diagnostics."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import channel as ch
from . import data as ds
from . import defense as dfn
from . import models as mdl
from . import verify as vf
from .nn import losses

log = logging.getLogger("rome")

CASES = ("ideal", "general", "worst")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- configuration

@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | digits | mnist-idx | cifar10
    classes: int = 10
    dim: int = 64
    margin: float = 5.0
    count: int = 3000
    train_count: int = 2000
    test_count: int | None = None
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    batches: list = field(default_factory=list)
    test_batches: list = field(default_factory=list)


@dataclass
class ChannelSpec:
    kind: str = "awgn"
    snr_db: float = 13.0
    rician_k: float | None = None

    def model(self) -> ch.ChannelModel:
        return ch.ChannelModel(self.kind, self.snr_db, self.rician_k)


@dataclass
class TrainSpec:
    batch_size: int = 128
    e2e_epochs: int = 12
    e2e_lr: float = 3e-3
    apg_epochs: int = 10
    apg_lr: float = 3e-3
    at_epochs: int = 8
    at_lr: float = 3e-3
    at_batch_size: int = 64
    at_pgd_steps: int = 5
    mpd_epochs: int = 30
    mpd_lr: float = 3e-3
    mpd_batch_size: int = 64
    mpd_per_sample: bool = True
    mpd_adversarial: float = 0.0
    worst_epochs: int = 10
    chain: bool = True
    trigger_dim: int = 128
    apg_width: int = 16
    mpd_width: int = 16


@dataclass
class ModelSpec:
    scale: int = 8
    P: float = 1.0


@dataclass
class VerifySpec:
    p: list = field(default_factory=lambda: [2])
    mc_samples: int = 2000
    delta: float = 1e-3


@dataclass
class CaseWiring:
    """Which attack feeds each stage; ``pgd`` is the white-box agent, ``apg`` the generator."""

    at_attack: str
    mpd_attack: str
    levels: str  # grid | tailored
    eval_attack: str  # apg | apg-worst
    mpd_adversarial: float | None = None


WIRING = {
    "ideal": CaseWiring("apg", "apg", "tailored", "apg"),
    "general": CaseWiring("pgd", "pgd", "grid", "apg"),
    "worst": CaseWiring("pgd", "pgd", "grid", "apg-worst"),
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    psr_db: list = field(default_factory=lambda: [-15.0, -10.333333, -5.666667, -1.0])
    eval_psr_db: list | None = None
    eye_psr_db: list | None = None
    eye_samples: int = 1000
    case: str = "general"
    N: int = 4
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)
    eval_repeats: int = 2
    wiring: dict = field(default_factory=dict)
    output_dir: str = "runs/out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}, got {self.case!r}")
        grid = np.asarray(self.psr_db, dtype=np.float64)
        if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0):
            raise ConfigError("psr_db must be a strictly increasing list of at least two values")
        if self.N != len(grid):
            raise ConfigError(f"N={self.N} but psr_db has {len(grid)} boundaries")
        for name in ("eval_psr_db", "eye_psr_db"):
            g = getattr(self, name)
            if g is not None and (len(g) == 0 or np.any(np.diff(g) <= 0)):
                raise ConfigError(f"{name} must be non-empty and strictly increasing")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be an explicit non-negative integer")
        if self.eval_repeats < 1:
            raise ConfigError("eval_repeats must be positive")
        unknown = set(self.wiring) - {f.name for f in dataclasses.fields(CaseWiring)}
        if unknown:
            raise ConfigError(f"unknown wiring keys {sorted(unknown)}")
        return self

    @property
    def case_wiring(self) -> CaseWiring:
        return dataclasses.replace(WIRING[self.case], **self.wiring)

    @property
    def eval_grid(self):
        return list(self.eval_psr_db if self.eval_psr_db is not None else self.psr_db)

    @property
    def eye_grid(self):
        if self.eye_psr_db is not None:
            return list(self.eye_psr_db)
        lo, hi = self.psr_db[0], self.psr_db[-1]
        return [float(v) for v in np.linspace(lo - 3.0, hi + 1.0, 3 * len(self.psr_db) + 4)]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        d = dict(d)
        sub = {"dataset": DatasetSpec, "channel": ChannelSpec, "model": ModelSpec,
               "train": TrainSpec, "verify": VerifySpec}
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        for key, typ in sub.items():
            if key in d:
                fields_ok = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - fields_ok
                if bad:
                    raise ConfigError(f"unknown {key} keys {sorted(bad)}")
                d[key] = typ(**d[key])
        if "psr_db" in d and "N" not in d:
            d["N"] = len(d["psr_db"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- metric table

METRIC_FIELDS = ("case", "psr_db", "snr_db", "model", "accuracy", "samples")


@dataclass
class MetricTable:
    rows: list = field(default_factory=list)

    def add(self, case, psr_db, snr_db, model, accuracy, samples):
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        if samples <= 0:
            raise ValueError("sample count must be positive")
        self.rows.append({"case": case, "psr_db": psr_db, "snr_db": float(snr_db),
                          "model": model, "accuracy": float(accuracy), "samples": int(samples)})

    def get(self, model, psr_db):
        for r in self.rows:
            if r["model"] == model and r["psr_db"] == psr_db:
                return r["accuracy"]
        raise KeyError((model, psr_db))

    def models(self):
        return list(dict.fromkeys(r["model"] for r in self.rows))

    def psr_points(self):
        return list(dict.fromkeys(r["psr_db"] for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            psr = r["psr_db"] if isinstance(r["psr_db"], str) else f"{r['psr_db']:.4f}"
            w.writerow([r["case"], psr, f"{r['snr_db']:.2f}", r["model"],
                        f"{r['accuracy']:.6f}", r["samples"]])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path):
        t = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                psr = r["psr_db"] if r["psr_db"] == "clean" else float(r["psr_db"])
                t.add(r["case"], psr, float(r["snr_db"]), r["model"], float(r["accuracy"]),
                      int(r["samples"]))
        return t


# ---------------------------------------------------------------- data

def load_dataset(spec: DatasetSpec, rng):
    """Train and test splits for the configured source."""
    if spec.kind == "synthetic":
        full = ds.synth_dataset(spec.classes, spec.dim, spec.margin, spec.count, rng)
        train, test = full.split(spec.train_count)
    elif spec.kind == "digits":
        from sklearn.datasets import load_digits

        d = load_digits()
        order = rng.permutation(len(d.target))
        full = ds.Dataset(d.images[order][:, None] / 16.0, d.target[order].astype(np.int64))
        train, test = full.split(spec.train_count)
    elif spec.kind == "mnist-idx":
        train = ds.load_mnist_idx(spec.images, spec.labels)
        if spec.test_images:
            test = ds.load_mnist_idx(spec.test_images, spec.test_labels)
        else:
            train, test = train.split(spec.train_count)
    elif spec.kind == "cifar10":
        parts = [ds.load_cifar10_batch(p) for p in spec.batches]
        train = ds.Dataset(np.concatenate([p.images for p in parts]),
                           np.concatenate([p.labels for p in parts]))
        if spec.test_batches:
            t = [ds.load_cifar10_batch(p) for p in spec.test_batches]
            test = ds.Dataset(np.concatenate([p.images for p in t]), np.concatenate([p.labels for p in t]))
        else:
            train, test = train.split(spec.train_count)
    else:
        raise ConfigError(f"unknown dataset kind {spec.kind!r}")
    if spec.train_count and len(train) > spec.train_count:
        train = train.subset(slice(0, spec.train_count))
    if spec.test_count and len(test) > spec.test_count:
        test = test.subset(slice(0, spec.test_count))
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("empty train or test split")
    return train, test


# ---------------------------------------------------------------- pipeline state

@dataclass
class Workspace:
    config: ExperimentConfig
    train: ds.Dataset = None
    test: ds.Dataset = None
    encoder: mdl.SemanticEncoder = None
    ladder: list = None
    grid_levels: dfn.PowerLevelSet = None
    levels: dfn.PowerLevelSet = None
    mpd: dfn.MPD = None
    apg: atk.APG = None
    attacker: atk.APG = None
    x_train: np.ndarray = None
    x_test: np.ndarray = None
    level_log: dfn.LevelLog = None
    tailoring: dict = field(default_factory=dict)

    @property
    def stack(self) -> dfn.RomeStack:
        return dfn.RomeStack(self.encoder, self.ladder, self.mpd, self.levels)


def _rngs(seed):
    names = ("data", "e2e", "apg", "ladder", "levels", "mpd", "attacker", "eval", "verify", "eye")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _agent(name, ws: Workspace, steps):
    if name == "pgd":
        return atk.pgd_attack(steps)
    if name == "apg":
        return atk.apg_attack(ws.apg)
    if name == "gaussian":
        return atk.gaussian_attack
    if name == "fgsm":
        return atk.fgsm_attack
    raise ConfigError(f"unknown attack {name!r}")


def _stage(name):
    def wrap(fn):
        def run(*a, **k):
            log.info("stage %s", name)
            try:
                return fn(*a, **k)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
                raise StageError(name, exc) from exc
        return run
    return wrap


@_stage("data")
def stage_data(ws, rng):
    ws.train, ws.test = load_dataset(ws.config.dataset, rng)


@_stage("e2e")
def stage_e2e(ws, rng):
    c = ws.config
    mc = mdl.ModelConfig(tuple(ws.train.shape), c.model.scale, c.model.P, c.dataset.classes)
    ws.encoder = mdl.build_encoder(mc, rng)
    g0 = mdl.build_classifier(mc, ws.encoder.feature_shape, rng)
    g0.graph.name = "G0"
    mdl.train_end_to_end(ws.encoder, g0, ws.train.images, ws.train.labels, c.channel.model(), rng,
                         epochs=c.train.e2e_epochs, batch_size=c.train.batch_size,
                         lr=c.train.e2e_lr, log=log.debug)
    ws.encoder.graph.freeze()
    g0.graph.freeze()
    ws.ladder = [g0]
    ws.x_train = mdl.encode(ws.encoder, ws.train.images)
    ws.x_test = mdl.encode(ws.encoder, ws.test.images)


@_stage("apg")
def stage_apg(ws, rng):
    c = ws.config
    ws.grid_levels = dfn.PowerLevelSet.from_psr(c.psr_db, c.model.P)
    b = ws.grid_levels.boundaries
    ws.apg = atk.build_apg(ws.encoder.feature_shape, rng, c.train.trigger_dim, c.train.apg_width)
    atk.train_apg(ws.apg, ws.ladder[0], ws.x_train, ws.train.labels, c.channel.model(),
                  (b[0], b[-1]), rng, epochs=c.train.apg_epochs, batch_size=c.train.batch_size,
                  lr=c.train.apg_lr, log=log.debug)


@_stage("ladder")
def stage_ladder(ws, rng):
    c = ws.config
    attack = _agent(c.case_wiring.at_attack, ws, c.train.at_pgd_steps)
    ws.ladder = dfn.acquire_base_classifiers(
        ws.ladder[0], attack, ws.grid_levels, ws.x_train, ws.train.labels, c.channel.model(), rng,
        epochs=c.train.at_epochs, chain=c.train.chain, log=log.debug,
        batch_size=c.train.at_batch_size, lr=c.train.at_lr)


@_stage("levels")
def stage_levels(ws, rng):
    c = ws.config
    if c.case_wiring.levels == "grid":
        ws.levels = ws.grid_levels
        return
    b = ws.grid_levels.boundaries
    grid = np.geomspace(b[0] / 2, b[-1], 4 * c.N)
    ws.levels, acc, fallback = dfn.tailor_levels(
        ws.ladder, atk.apg_attack(ws.apg), grid, ws.x_test, ws.test.labels, c.channel.model(),
        rng, fallback=ws.grid_levels)
    ws.tailoring = {"grid": grid.tolist(), "fallback": fallback}


@_stage("mpd")
def stage_mpd(ws, rng):
    c = ws.config
    w = c.case_wiring
    adv = c.train.mpd_adversarial if w.mpd_adversarial is None else w.mpd_adversarial
    ws.mpd = dfn.build_mpd(ws.encoder.feature_shape, ws.levels.N, c.dataset.classes, rng,
                           width=c.train.mpd_width)
    ws.mpd, ws.level_log = dfn.train_mpd(
        ws.mpd, ws.ladder, _agent(w.mpd_attack, ws, c.train.at_pgd_steps), ws.levels, ws.x_train,
        ws.train.labels, c.channel.model(), rng, epochs=c.train.mpd_epochs,
        batch_size=c.train.mpd_batch_size, lr=c.train.mpd_lr, adversarial=adv,
        per_sample=c.train.mpd_per_sample, log=log.debug)


@_stage("attacker")
def stage_attacker(ws, rng):
    c = ws.config
    if c.case_wiring.eval_attack == "apg":
        ws.attacker = ws.apg
        return
    ws.attacker = atk.build_apg(ws.encoder.feature_shape, rng, c.train.trigger_dim, c.train.apg_width)
    atk.train_apg_worst_case(ws.attacker, ws.ladder, ws.mpd, ws.levels, ws.x_train,
                             ws.train.labels, c.channel.model(), rng, epochs=c.train.worst_epochs,
                             batch_size=c.train.batch_size, lr=c.train.apg_lr, log=log.debug)


def received_batch(x, channel, rng, eps, attack, labels, victim=None):
    """Equalised received signals with optional jamming at radius ``eps``."""
    h, h_a, var = ch.draw_channels(channel, rng, len(x))
    y = ch.equalize(ch.transmit(x, None, (h, h_a, var), rng), h)
    if eps > 0:
        gain = h_a / h
        y = atk.jam(y, attack(victim, y, labels, np.full(len(x), float(eps)), gain, rng), gain)
    return y


def evaluate_table(ws: Workspace, rng, attack=None, psr_grid=None, table=None, flush=None):
    """Accuracy of every base classifier and the ensemble at clean + each PSR point.

    All models in a cell see the same channel, noise and jamming draws.
    """
    c = ws.config
    table = table if table is not None else MetricTable()
    attack = attack or atk.apg_attack(ws.attacker)
    channel = c.channel.model()
    x = np.tile(ws.x_test, (c.eval_repeats, 1))
    labels = np.tile(ws.test.labels, c.eval_repeats)
    stack = ws.stack
    names = [f"G{i}" for i in range(len(ws.ladder))] + ["ROME"]
    grid = psr_grid if psr_grid is not None else c.eval_grid
    for psr in ["clean"] + list(grid):
        eps = 0.0 if psr == "clean" else float(ch.psr_to_epsilon(psr, c.model.P))
        y = received_batch(x, channel, rng, eps, attack, labels, victim=ws.ladder[0])
        preds = [np.argmax(g.graph.run(y), axis=1) for g in ws.ladder] + [stack.predict(y)[1]]
        for name, p in zip(names, preds):
            table.add(c.case, psr, c.channel.snr_db, name, float((p == labels).mean()), len(labels))
        if flush:
            flush(table)
    return table


# ---------------------------------------------------------------- detector diagnostics

@dataclass
class EyeTable:
    eps: np.ndarray  # (G,)
    pd: np.ndarray  # (G, N) mean detector output
    samples: int

    def to_csv(self, P=1.0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        N = self.pd.shape[1]
        w.writerow(["eps", "psr_db"] + [f"p_L{k}" for k in range(N)] + ["samples"])
        for e, row in zip(self.eps, self.pd):
            psr = "-inf" if e == 0 else f"{float(ch.epsilon_to_psr(e, P)):.4f}"
            w.writerow([f"{e:.6f}", psr] + [f"{v:.6f}" for v in row] + [self.samples])
        return buf.getvalue()


def eye_diagram(stack: dfn.RomeStack, attack, eps_grid, features, labels, channel, rng,
                samples=1000, victim=None) -> EyeTable:
    """Mean detector output per jamming radius, over at least ``samples`` signals."""
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if eps_grid.size == 0:
        raise ValueError("empty radius grid")
    reps = int(np.ceil(samples / len(features)))
    x = np.tile(features, (reps, 1))[:max(samples, len(features))]
    c = np.tile(labels, reps)[:len(x)]
    rows = []
    for eps in eps_grid:
        y = received_batch(x, channel, rng, eps, attack, c, victim=victim or stack.classifiers[0])
        rows.append(stack.predict(y)[2].mean(axis=0))
    return EyeTable(eps_grid, np.array(rows), len(x))


def check_eye_properties(eye: EyeTable, levels: dfn.PowerLevelSet, concavity_tol=0.05,
                       concavity_share=0.9, boundary_tol=0.2):
    """Check the detector's eye-diagram against the four idealised properties.

    Only the row-sum property is a hard requirement; the others are reported.
    """
    eps, pd = np.asarray(eye.eps), np.asarray(eye.pd)
    N = levels.N
    if pd.shape[1] != N:
        raise ValueError(f"eye table has {pd.shape[1]} levels, level set has {N}")
    b = levels.boundaries
    spans = [(0.0, b[0])] + [levels.interval(i) for i in range(1, N)]
    counts = [int(((eps >= lo) & (eps <= hi)).sum()) for lo, hi in spans]
    if min(counts) < 3:
        raise ValueError(f"grid too coarse: points per level {counts} (need >= 3)")
    report = {}
    sums = pd.sum(axis=1)
    report["row_sums"] = {"pass": bool(np.all(np.abs(sums - 1) <= 1e-6)),
                          "max_error": float(np.max(np.abs(sums - 1)))}
    d2 = pd[2:] - 2 * pd[1:-1] + pd[:-2]
    share = float(np.mean(d2 <= concavity_tol))
    report["concavity"] = {"pass": share >= concavity_share, "share": share}
    dom = []
    for k in range(N):
        j = int(np.argmax(pd[:, k]))
        neighbours = sum(pd[j, m] for m in (k - 1, k + 1) if 0 <= m < N)
        dom.append({"level": k, "eps_star": float(eps[j]), "p": float(pd[j, k]),
                    "neighbours": float(neighbours), "pass": bool(pd[j, k] > neighbours)})
    report["dominance"] = {"pass": all(d["pass"] for d in dom), "levels": dom}
    # the top boundary has no level above it, so only interior boundaries are checked
    bvals = []
    for i in range(N - 1):
        p_lo = float(np.interp(b[i], eps, pd[:, i]))
        p_hi = float(np.interp(b[i], eps, pd[:, i + 1]))
        ok = abs(p_lo - 0.5) <= boundary_tol and abs(p_hi - 0.5) <= boundary_tol
        bvals.append({"eps": b[i], "p_below": p_lo, "p_above": p_hi, "pass": ok})
    report["boundaries"] = {"pass": all(v["pass"] for v in bvals), "points": bvals}
    return report


# ---------------------------------------------------------------- verification report

VERIFY_FIELDS_HEAD = ("model", "rho", "p")


def verification_rows(ws: Workspace, rng):
    """Distortion bound, robustness and Monte-Carlo violations per (model, rho, p)."""
    c = ws.config
    k = ws.encoder.k
    eta = ch.noise_radius(c.channel.model().noise_var, k, c.verify.delta, rng=rng)
    center = ws.x_test[0]
    r_rho = ws.levels.boundaries[-1] + eta
    rows = []
    stack = ws.stack
    for eps in ws.levels.boundaries:
        rho = float(eps + eta)
        y = received_batch(ws.x_test, c.channel.model(), rng, eps, atk.apg_attack(ws.attacker),
                           ws.test.labels, victim=ws.ladder[0])
        p_d = stack.predict(y)[2].mean(axis=0)
        for p in c.verify.p:
            p = np.inf if p in ("inf", float("inf")) else p
            region = vf.InputRegion(center, rho, p)
            ref = vf.reference_region(ws.ladder[0].graph, r_rho, p)
            maps, ref_maps = [], []
            for i, g in enumerate(ws.ladder):
                bmap = vf.propagate(g.graph, region)
                maps.append(bmap)
                ref_maps.append(vf.propagate(g.graph, ref))
                B = vf.distortion_from_map(bmap, region).B
                r = vf.robustness_from_map(ref_maps[-1], p)
                viol = vf.count_violations(g.graph, region, c.verify.mc_samples, rng, bmap=bmap)
                rows.append((f"G{i}", rho, p, B, r, viol))
            B_e, _ = vf.ensemble_direct(maps, p_d, region)
            _, r_e = vf.ensemble_direct(ref_maps, p_d, ref)
            up, lo = vf.ensemble_bounds(maps, p_d, region)
            F = vf.sample_ball(center, rho, p, c.verify.mc_samples, rng)
            outs = np.einsum("n,nbc->bc", p_d, np.stack([g.graph.run(F) for g in ws.ladder]))
            viol = int(((outs > up + 1e-9) | (outs < lo - 1e-9)).sum())
            rows.append(("ROME", rho, p, B_e, r_e, viol))
    return rows


def verification_csv(rows, classes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(VERIFY_FIELDS_HEAD) + [f"B_{c}" for c in range(classes)] + ["r", "violations"])
    for model, rho, p, B, r, viol in rows:
        w.writerow([model, f"{rho:.6f}", "inf" if p == np.inf else str(p)]
                   + [f"{v:.6f}" for v in B] + [f"{r:.6f}", viol])
    return buf.getvalue()


# ---------------------------------------------------------------- orchestration

def config_echo(ws: Workspace) -> dict:
    c = ws.config
    echo = c.to_dict()
    echo["resolved"] = {
        "grid_boundaries_eps": list(ws.grid_levels.boundaries) if ws.grid_levels else None,
        "level_boundaries_eps": list(ws.levels.boundaries) if ws.levels else None,
        "level_boundaries_psr_db": ws.levels.psr_db(c.model.P) if ws.levels else None,
        "wiring": dataclasses.asdict(c.case_wiring),
        "tailoring": ws.tailoring,
        "k": ws.encoder.k if ws.encoder else None,
    }
    return echo


def train_pipeline(config: ExperimentConfig, rngs=None) -> Workspace:
    """Every training stage of a case: encoder + G0, generator, ladder, levels, detector, attacker."""
    rngs = rngs or _rngs(config.seed)
    ws = Workspace(config)
    stage_data(ws, rngs["data"])
    stage_e2e(ws, rngs["e2e"])
    stage_apg(ws, rngs["apg"])
    stage_ladder(ws, rngs["ladder"])
    stage_levels(ws, rngs["levels"])
    stage_mpd(ws, rngs["mpd"])
    stage_attacker(ws, rngs["attacker"])
    return ws


def save_workspace(ws: Workspace, out: Path):
    ckpt = out / "checkpoints"
    dfn.save_bundle(ws.stack, ckpt / "bundle")
    atk.save_apg(ws.apg, ckpt / "apg.npz")
    if ws.attacker is not ws.apg:
        atk.save_apg(ws.attacker, ckpt / "attacker.npz")
    (out / "config.json").write_text(json.dumps(config_echo(ws), indent=2, sort_keys=True) + "\n")


def load_workspace(config: ExperimentConfig, out: Path, rngs=None) -> Workspace:
    """Rebuild a workspace from saved checkpoints (data splits are re-derived from the seed)."""
    out = Path(out)
    rngs = rngs or _rngs(config.seed)
    ws = Workspace(config)
    stage_data(ws, rngs["data"])
    stack = dfn.load_bundle(out / "checkpoints" / "bundle")
    ws.encoder, ws.ladder, ws.mpd, ws.levels = stack.encoder, stack.classifiers, stack.mpd, stack.levels
    ws.grid_levels = dfn.PowerLevelSet.from_psr(config.psr_db, config.model.P)
    ws.apg = atk.load_apg(out / "checkpoints" / "apg.npz")
    worst = out / "checkpoints" / "attacker.npz"
    ws.attacker = atk.load_apg(worst) if worst.exists() else ws.apg
    ws.x_train = mdl.encode(ws.encoder, ws.train.images)
    ws.x_test = mdl.encode(ws.encoder, ws.test.images)
    return ws


def run_case_study(config: ExperimentConfig, out=None):
    """Full pipeline for one case; writes metrics.csv, verify.csv, eye.csv, config and checkpoints.

    Returns ``(MetricTable, Workspace, extras)`` where extras holds the eye
    table and its property report.
    """
    out = Path(out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rngs = _rngs(config.seed)
    ws = train_pipeline(config, rngs)
    save_workspace(ws, out)
    metrics_path = out / "metrics.csv"
    table = MetricTable()
    stage_eval = _stage("evaluate")(evaluate_table)
    stage_eval(ws, rngs["eval"], table=table, flush=lambda t: t.write(metrics_path))
    table.write(metrics_path)
    rows = _stage("verify")(verification_rows)(ws, rngs["verify"])
    (out / "verify.csv").write_text(verification_csv(rows, config.dataset.classes))
    eye, report = _stage("eye")(run_eye)(ws, rngs["eye"])
    (out / "eye.csv").write_text(eye.to_csv(config.model.P))
    (out / "eye_properties.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return table, ws, {"eye": eye, "eye_properties": report, "verify_rows": rows}


def run_eye(ws: Workspace, rng):
    c = ws.config
    eps = np.concatenate([[0.0], ch.psr_to_epsilon(c.eye_grid, c.model.P)])
    eye = eye_diagram(ws.stack, atk.apg_attack(ws.attacker), eps, ws.x_test, ws.test.labels,
                      c.channel.model(), rng, samples=c.eye_samples)
    try:
        report = check_eye_properties(eye, ws.levels)
    except ValueError as exc:
        report = {"error": str(exc)}
    return eye, report


def level_confusion(ws: Workspace, attack, rng, samples=2000):
    """Detector confusion matrix with levels drawn uniformly and radii uniform in dB."""
    N = ws.levels.N
    conf = np.zeros((N, N), dtype=np.int64)
    per = max(1, samples // N)
    for level in range(N):
        idx = rng.integers(len(ws.x_test), size=per)
        x, c = ws.x_test[idx], ws.test.labels[idx]
        h, h_a, var = ch.draw_channels(ws.config.channel.model(), rng, per)
        y = ch.equalize(ch.transmit(x, None, (h, h_a, var), rng), h)
        if level:
            eps = ws.levels.sample(level, rng, per)
            y = atk.jam(y, attack(ws.ladder[0], y, c, eps, h_a / h, rng), h_a / h)
        pd = losses.softmax(dfn.mpd_logits(ws.mpd, y, dfn.prediction_map(ws.ladder, y)), axis=-1)
        np.add.at(conf[level], pd.argmax(axis=1), 1)
    return conf


# ---------------------------------------------------------------- attack specs

ATTACK_TYPES = ("gaussian", "fgsm", "pgd", "apg")


@dataclass
class AttackSpec:
    """``{"type": ..., "psr_db": [...], "steps": ..., "checkpoint": ...}`` as accepted by the CLI."""

    type: str = "apg"
    psr_db: list | None = None
    steps: int = 10
    checkpoint: str | None = None

    def __post_init__(self):
        if self.type not in ATTACK_TYPES:
            raise ConfigError(f"attack type must be one of {ATTACK_TYPES}, got {self.type!r}")
        if isinstance(self.psr_db, (int, float)):
            self.psr_db = [float(self.psr_db)]
        if self.steps < 1:
            raise ConfigError("steps must be positive")

    def build(self, ws: Workspace):
        if self.type == "apg":
            gen = atk.load_apg(self.checkpoint) if self.checkpoint else ws.attacker
            return atk.apg_attack(gen)
        if self.type == "pgd":
            return atk.pgd_attack(self.steps)
        return _agent(self.type, ws, self.steps)

    @classmethod
    def parse(cls, text_or_path):
        """Inline JSON or a path to a JSON file."""
        p = Path(text_or_path)
        raw = p.read_text() if p.exists() else text_or_path
        d = json.loads(raw)
        bad = set(d) - {f.name for f in dataclasses.fields(cls)}
        if bad:
            raise ConfigError(f"unknown attack keys {sorted(bad)}")
        return cls(**d)
