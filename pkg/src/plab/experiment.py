"""Reproducible experiment runner.

A run directory holds ``config.json``, one ``stage_<name>/`` directory per
pipeline stage, ``manifest.json`` (SHA-256 of every artifact plus a cache
key per stage), ``report.json`` and ``charts/``.  Stages are skipped when
their key matches and their files verify, so interrupted runs resume and
sweeps reuse upstream work through ``cache_dirs``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bounds import (SHAPE_FLAG, BoundInputs, capacity_report, clean_bound_rhs,
                     clean_coefficient, empirical_rademacher, poison_bound_rhs)
from .data import (Dataset, SynthSpec, apply_trigger, build_poisoned_set, load_cifar_binary,
                   load_idx, plan_poison, synth_clusters)
from .metrics import (ConditionReport, eval_accuracy, eval_asr, measure_c1_epsilon,
                      measure_c3_tau, measure_similarity_k, v_adv, v_sc)
from .models import Network, NetworkSpec, build, report_label
from .pgd import per_sample_ce
from .tensor import DTYPE
from .training import (REFERENCE_F1, REFERENCE_F2, REFERENCE_VICTIM, History, TrainConfig,
                       empirical_risk, train)
from .triggers import (TRIGGER_KINDS, MinMinSchedule, TriggerSet, adversarial_pair_set,
                       baseline_trigger, build_mask, compose_trigger, empty_mask,
                       train_minmin_shortcut)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("data", "f1", "t1", "f2", "triggers", "poison", "control", "victim", "metrics",
          "bounds")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ManifestError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


def _from_dict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return d


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"                 # synth | idx | cifar_bin
    synth: dict = field(default_factory=lambda: {
        "classes": 4, "per_class": 900, "shape": [1, 16, 16], "sigma": 0.1,
        "centers": None, "center_low": 0.45, "center_high": 0.55})
    images: str | None = None             # idx image file
    labels: str | None = None             # idx label file
    paths: list = field(default_factory=list)   # cifar binary batches
    classes: list | None = None           # keep only these labels (relabelled 0..)
    max_per_class: int | None = None
    train_fraction: float = 2 / 3
    attacker_fraction: float = 0.5

    def validate(self) -> None:
        if self.source not in ("synth", "idx", "cifar_bin"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "synth":
            SynthSpec.from_dict(self.synth)
        if self.source == "idx":
            for p in (self.images, self.labels):
                if p is None or not Path(p).exists():
                    raise ConfigError(f"missing IDX file {p}")
        if self.source == "cifar_bin":
            if not self.paths:
                raise ConfigError("cifar_bin needs at least one batch path")
            for p in self.paths:
                if not Path(p).exists():
                    raise ConfigError(f"missing CIFAR batch {p}")
        if not 0 < self.train_fraction < 1 or not 0 < self.attacker_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1), attacker_fraction in (0, 1]")


@dataclass(frozen=True)
class NetConfig:
    kind: str = "mlp"
    width: int = 64
    depth: int = 1
    channels: int = 8

    def spec(self, input_dims, classes: int) -> NetworkSpec:
        return NetworkSpec(self.kind, self.width, self.depth, tuple(input_dims), classes,
                           self.channels)


@dataclass(frozen=True)
class TriggerConfig:
    kind: str = "ours"
    eta: float = 16 / 255
    corner: list = field(default_factory=lambda: [6, 6])
    t1_pgd_steps: int = 8                # adversarial pairs for the shortcut net
    pgd_steps: int = 8                   # composed trigger, adversarial part
    scut_steps: int = 20                 # composed trigger, shortcut part
    f2_channels: int = 16
    pixels: int = 30                     # rn_l0
    adv_steps: int = 40
    ua_iterations: int = 10

    def validate(self) -> None:
        if self.kind not in TRIGGER_KINDS:
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if len(self.corner) != 2:
            raise ConfigError("corner must be [h, w]")


@dataclass(frozen=True)
class TrainingConfigs:
    f1: dict = field(default_factory=lambda: TrainConfig(
        epochs=30, lr=0.05, lr_milestones=(20,), lr_factor=0.5).to_dict())
    f2: dict = field(default_factory=lambda: MinMinSchedule(rounds=5, eps_steps=10).to_dict())
    victim: dict = field(default_factory=lambda: TrainConfig(
        epochs=60, lr=0.02, lr_milestones=(24, 45), lr_factor=0.8).to_dict())
    v_sc: dict = field(default_factory=lambda: TrainConfig(
        epochs=40, lr=0.01, lr_milestones=(), lr_factor=1.0).to_dict())

    def f1_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.f1, "seed": seed})

    def victim_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.victim, "seed": seed})

    def f2_schedule(self) -> MinMinSchedule:
        return MinMinSchedule.from_dict(self.f2)

    def v_sc_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.v_sc)


@dataclass(frozen=True)
class MetricConfig:
    v_sc: bool = True
    v_sc_samples: int = 300
    tau: bool = True
    eval_limit: int | None = None


@dataclass(frozen=True)
class BoundConfig:
    delta: float = 0.05
    c_scale: float = 1.0
    A: float = 1.0
    num_sigma: int = 2000
    rad_samples: int = 200
    rad_candidates: int = 8
    lam: float = 1.0


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    model: int = 0
    trigger: int = 0
    train: int = 0


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "desk"
    dataset: DataConfig = field(default_factory=DataConfig)
    victim: NetConfig = field(default_factory=lambda: NetConfig(width=256))
    f1: NetConfig = field(default_factory=NetConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    target: int = 0
    alpha: float = 0.1
    training: TrainingConfigs = field(default_factory=TrainingConfigs)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    bounds: BoundConfig = field(default_factory=BoundConfig)
    seeds: Seeds = field(default_factory=Seeds)

    _NESTED = {"dataset": DataConfig, "victim": NetConfig, "f1": NetConfig,
               "trigger": TriggerConfig, "training": TrainingConfigs,
               "metrics": MetricConfig, "bounds": BoundConfig, "seeds": Seeds}

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha} must lie in [0, 1)")
        if self.target < 0:
            raise ConfigError("target must be a 0-based label")
        self.dataset.validate()
        self.trigger.validate()
        try:
            self.training.f1_config(0)
            self.training.victim_config(0)
            self.training.f2_schedule()
            self.training.v_sc_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_from_dict(cls, d, "config"))
        for key, sub in cls._NESTED.items():
            if key in d:
                d[key] = sub(**_from_dict(sub, d[key], key))
        if "training" in d:
            for k in ("f1", "victim", "v_sc"):
                _from_dict(TrainConfig, getattr(d["training"], k), f"training.{k}")
            _from_dict(MinMinSchedule, d["training"].f2, "training.f2")
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        """Dotted-path update, e.g. ``replace(**{"trigger.eta": 0.1})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *head, last = key.split(".")
            for h in head:
                node = node[h]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = value
        return RunConfig.from_dict(d)

    def with_seed_overrides(self, overrides: dict) -> "RunConfig":
        seeds = self.seeds.__dict__.copy()
        for k, v in overrides.items():
            if k == "all":
                seeds = {s: int(v) for s in seeds}
            elif k in seeds:
                seeds[k] = int(v)
            else:
                raise ConfigError(f"unknown seed {k!r}")
        return self.replace(**{f"seeds.{k}": v for k, v in seeds.items()})


# --------------------------------------------------------------------------
# hashing and manifest


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Manifest:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.data = {"schema_version": SCHEMA_VERSION, "stages": {}, "outputs": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def save(self) -> None:
        _write_json(self.path, self.data)

    def stage_valid(self, stage: str, key: str) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None or entry["key"] != key:
            return False
        return all((self.root / rel).exists() and sha256_file(self.root / rel) == h
                   for rel, h in entry["files"].items())

    def record(self, stage: str, key: str, files) -> None:
        self.data["stages"][stage] = {
            "key": key,
            "files": {str(Path(f).relative_to(self.root)): sha256_file(f) for f in sorted(files)}}
        self.save()

    def record_output(self, path: Path) -> None:
        self.data["outputs"][str(path.relative_to(self.root))] = sha256_file(path)
        self.save()

    def verify(self) -> None:
        entries = [f for s in self.data["stages"].values() for f in s["files"].items()]
        entries += list(self.data["outputs"].items())
        for rel, h in entries:
            p = self.root / rel
            if not p.exists():
                raise ManifestError(f"missing artifact {rel}")
            if sha256_file(p) != h:
                raise ManifestError(f"hash mismatch for {rel}")


# --------------------------------------------------------------------------
# persistence helpers


def _save_net(path: Path, net: Network) -> None:
    T.save_tensors(path, net.state())


def _load_net(path: Path, spec: NetworkSpec, seed: int = 0) -> Network:
    net = build(spec, seed)
    net.load_state(T.load_tensors(path))
    return net


def _save_dataset(path: Path, ds: Dataset) -> None:
    T.save_tensors(path, [ds.images, ds.labels.astype(DTYPE)])


def _load_dataset(path: Path, name: str, classes: int) -> Dataset:
    images, labels = T.load_tensors(path)
    return Dataset(images, labels.astype(np.int64), name, classes)


def _history_from_csv(text: str) -> History:
    rows = list(csv.DictReader(io.StringIO(text)))
    return History([{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}
                    for r in rows])


# --------------------------------------------------------------------------
# the pipeline


def _load_source(cfg: DataConfig, seed: int) -> Dataset:
    if cfg.source == "synth":
        ds = synth_clusters(SynthSpec.from_dict(cfg.synth), seed, "synth")
    elif cfg.source == "idx":
        ds = load_idx(cfg.images, cfg.labels)
    else:
        ds = load_cifar_binary(cfg.paths)
    if cfg.classes is not None:
        keep = np.flatnonzero(np.isin(ds.labels, cfg.classes))
        remap = {c: i for i, c in enumerate(cfg.classes)}
        ds = Dataset(ds.images[keep], np.array([remap[int(y)] for y in ds.labels[keep]]),
                     ds.name, len(cfg.classes))
    if cfg.max_per_class is not None:
        idx = np.concatenate([np.flatnonzero(ds.labels == c)[:cfg.max_per_class]
                              for c in range(ds.classes)])
        ds = ds.subset(np.sort(idx))
    return ds


@dataclass
class RunReport:
    data: dict

    @property
    def condition(self) -> dict:
        return self.data["condition"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


class Pipeline:
    """Stage-by-stage executor over one run directory."""

    def __init__(self, config: RunConfig, out_dir, cache_dirs=()):
        self.cfg = config.validate()
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cache_dirs = [Path(c) for c in cache_dirs]
        cfg_path = self.root / "config.json"
        cfg_path.write_text(config.to_json())
        self.manifest = Manifest(self.root)
        self.keys: dict = {}
        self.state: dict = {}
        self.ran: list = []

    # -- key derivation ---------------------------------------------------
    def stage_key(self, stage: str) -> str:
        c = self.cfg
        s = c.seeds
        tk = c.trigger.kind
        needs_f1 = tk in ("ours", "ua", "adv")
        needs_f2 = tk in ("ours", "scut")
        k = self.keys.get
        deps = {
            "data": lambda: (c.dataset.__dict__, s.data),
            "f1": lambda: (k("data"), c.f1.__dict__, c.training.f1, s.model, s.train)
            if needs_f1 else None,
            "t1": lambda: (k("f1"), c.trigger.eta, c.trigger.corner, c.trigger.t1_pgd_steps,
                           tk == "scut") if needs_f2 else None,
            "f2": lambda: (k("t1"), c.training.f2, c.trigger.f2_channels, c.trigger.eta,
                           s.trigger) if needs_f2 else None,
            "triggers": lambda: (k("data"), k("f1"), k("f2"), c.trigger.__dict__, s.trigger),
            "poison": lambda: (k("triggers"), c.target, c.alpha, s.trigger),
            "control": lambda: (k("data"), c.victim.__dict__, c.training.victim, s.model,
                                s.train),
            "victim": lambda: (k("poison"), c.victim.__dict__, c.training.victim, s.model,
                               s.train),
            "metrics": lambda: (k("victim"), k("control"), c.metrics.__dict__, s.train),
            "bounds": lambda: (k("metrics"), c.bounds.__dict__, s.train),
        }[stage]()
        return None if deps is None else _key(stage, SCHEMA_VERSION, deps)

    def stage_dir(self, stage: str) -> Path:
        return self.root / f"stage_{stage}"

    def _try_cache(self, stage: str, key: str) -> bool:
        if self.manifest.stage_valid(stage, key):
            return True
        for cdir in self.cache_dirs:
            other = Manifest(cdir)
            if cdir.resolve() == self.root.resolve() or not other.stage_valid(stage, key):
                continue
            dst = self.stage_dir(stage)
            if dst.exists():
                shutil.rmtree(dst)
            shutil.copytree(cdir / f"stage_{stage}", dst)
            self.manifest.record(stage, key, sorted(p for p in dst.rglob("*") if p.is_file()))
            return True
        return False

    def run(self, until: str = "bounds") -> RunReport | None:
        stop = STAGES.index(until)
        for stage in STAGES[:stop + 1]:
            key = self.stage_key(stage)
            self.keys[stage] = key
            if key is None:
                continue
            try:
                if self._try_cache(stage, key):
                    getattr(self, f"_load_{stage}")()
                    continue
                d = self.stage_dir(stage)
                if d.exists():
                    shutil.rmtree(d)
                d.mkdir(parents=True)
                log.info("running stage %s", stage)
                files = getattr(self, f"_run_{stage}")(d)
                self.manifest.record(stage, key, files)
                self.ran.append(stage)
            except (ConfigError, ManifestError):
                raise
            except Exception as exc:
                self.manifest.save()
                raise StageError(stage, exc) from exc
        if until != "bounds":
            return None
        return self.write_report()

    # -- data -------------------------------------------------------------
    def _run_data(self, d: Path):
        c = self.cfg
        full = _load_source(c.dataset, c.seeds.data)
        if not 0 <= c.target < full.classes:
            raise ConfigError(f"target {c.target} outside [0, {full.classes})")
        train_set, test_set = full.split(c.dataset.train_fraction, c.seeds.data)
        att_idx = np.sort(T.make_rng(c.seeds.data, "attacker").permutation(len(train_set))[
            :int(math.floor(c.dataset.attacker_fraction * len(train_set) + 1e-9))])
        _save_dataset(d / "train.plab", train_set)
        _save_dataset(d / "test.plab", test_set)
        T.save_tensors(d / "attacker.plab", [att_idx.astype(DTYPE)])
        _write_json(d / "data.json", {"classes": full.classes, "shape": list(full.shape),
                                      "n_train": len(train_set), "n_test": len(test_set),
                                      "n_attacker": int(att_idx.size)})
        self._load_data()
        return [d / "train.plab", d / "test.plab", d / "attacker.plab", d / "data.json"]

    def _load_data(self):
        d = self.stage_dir("data")
        meta = json.loads((d / "data.json").read_text())
        m = meta["classes"]
        self.state["classes"] = m
        self.state["shape"] = tuple(meta["shape"])
        self.state["train"] = _load_dataset(d / "train.plab", "train", m)
        self.state["test"] = _load_dataset(d / "test.plab", "test", m)
        (att,) = T.load_tensors(d / "attacker.plab")
        self.state["attacker"] = self.state["train"].subset(att.astype(np.int64), "attacker")

    def _spec(self, net: NetConfig) -> NetworkSpec:
        return net.spec(self.state["shape"], self.state["classes"])

    # -- clean classifier f1 ----------------------------------------------
    def _run_f1(self, d: Path):
        c = self.cfg
        f1 = build(self._spec(c.f1), c.seeds.model * 7919 + 1)
        _, hist = train(f1, self.state["attacker"], c.training.f1_config(c.seeds.train))
        _save_net(d / "f1.plab", f1)
        (d / "history.csv").write_text(hist.to_csv())
        self.state["f1"] = f1
        return [d / "f1.plab", d / "history.csv"]

    def _load_f1(self):
        self.state["f1"] = _load_net(self.stage_dir("f1") / "f1.plab", self._spec(self.cfg.f1))

    # -- adversarial pair set ---------------------------------------------
    def _mask(self):
        if self.cfg.trigger.kind == "scut":
            return empty_mask(self.state["shape"])
        return build_mask(self.state["shape"], tuple(self.cfg.trigger.corner))

    def _run_t1(self, d: Path):
        c = self.cfg
        att = self.state["attacker"]
        mask = self._mask()
        if mask.values.any():
            _, delta = adversarial_pair_set(self.state["f1"], att, c.trigger.eta, mask,
                                            c.trigger.t1_pgd_steps)
        else:
            delta = np.zeros_like(att.images)
        T.save_tensors(d / "t1_delta.plab", [delta])
        self._load_t1()
        return [d / "t1_delta.plab"]

    def _load_t1(self):
        (delta,) = T.load_tensors(self.stage_dir("t1") / "t1_delta.plab")
        att = self.state["attacker"]
        n = len(att)
        self.state["t1"] = Dataset(np.concatenate([att.images + delta, att.images]),
                                   np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)]),
                                   "T1", 2)

    # -- shortcut network f2 ----------------------------------------------
    def _f2_spec(self) -> NetworkSpec:
        return NetworkSpec("f2_binary", input_dims=self.state["shape"], classes=2,
                           channels=self.cfg.trigger.f2_channels)

    def _run_f2(self, d: Path):
        c = self.cfg
        f2 = build(self._f2_spec(), c.seeds.trigger * 7919 + 2)
        f2, eps = train_minmin_shortcut(f2, self.state["t1"], c.trigger.eta,
                                        self._mask().complement, c.training.f2_schedule(),
                                        c.seeds.trigger)
        _save_net(d / "f2.plab", f2)
        T.save_tensors(d / "eps.plab", [eps])
        self.state["f2"] = f2
        return [d / "f2.plab", d / "eps.plab"]

    def _load_f2(self):
        self.state["f2"] = _load_net(self.stage_dir("f2") / "f2.plab", self._f2_spec())

    # -- triggers ---------------------------------------------------------
    def _make_triggers(self, ds: Dataset) -> TriggerSet:
        c = self.cfg
        tc = c.trigger
        if tc.kind == "ours":
            mask = self._mask()
            p, _ = compose_trigger(ds.images, ds.labels, self.state["f1"], self.state["f2"],
                                   mask, tc.eta, tc.pgd_steps, None, tc.scut_steps)
            return TriggerSet(p, float(tc.eta), "ours", mask)
        params = {"eta": tc.eta, "pixels": tc.pixels, "steps": tc.adv_steps,
                  "iterations": tc.ua_iterations}
        if tc.kind == "scut":
            params["steps"] = tc.scut_steps
        return baseline_trigger(tc.kind, params, ds, c.seeds.trigger,
                                self.state.get("f1"), self.state.get("f2"))

    def _run_triggers(self, d: Path):
        files = []
        for split in ("train", "test"):
            ts = self._make_triggers(self.state[split])
            ts.check_budget()
            files += ts.save(d, split)
            self.state[f"trig_{split}"] = ts
        return files

    def _load_triggers(self):
        d = self.stage_dir("triggers")
        for split in ("train", "test"):
            self.state[f"trig_{split}"] = TriggerSet.load(d, split)

    # -- poisoning --------------------------------------------------------
    def _run_poison(self, d: Path):
        c = self.cfg
        pd = build_poisoned_set(self.state["train"], self.state["trig_train"], c.target,
                                c.alpha, c.seeds.trigger)
        _write_json(d / "plan.json", pd.plan.to_dict())
        self.state["poisoned"] = pd.as_dataset()
        self.state["plan"] = pd.plan
        return [d / "plan.json"]

    def _load_poison(self):
        c = self.cfg
        pd = build_poisoned_set(self.state["train"], self.state["trig_train"], c.target,
                                c.alpha, c.seeds.trigger)
        stored = json.loads((self.stage_dir("poison") / "plan.json").read_text())
        if stored != pd.plan.to_dict():
            raise ManifestError("stored poison plan disagrees with the configuration")
        self.state["poisoned"] = pd.as_dataset()
        self.state["plan"] = pd.plan

    # -- victims ----------------------------------------------------------
    def _train_victim(self, d: Path, ds: Dataset, key: str):
        c = self.cfg
        net = build(self._spec(c.victim), c.seeds.model * 7919 + 3)
        _, hist = train(net, ds, c.training.victim_config(c.seeds.train))
        _save_net(d / "net.plab", net)
        (d / "history.csv").write_text(hist.to_csv())
        self.state[key] = net
        self.state[key + "_history"] = hist
        return [d / "net.plab", d / "history.csv"]

    def _load_victim_like(self, stage: str, key: str):
        d = self.stage_dir(stage)
        self.state[key] = _load_net(d / "net.plab", self._spec(self.cfg.victim))
        self.state[key + "_history"] = _history_from_csv((d / "history.csv").read_text())

    def _run_control(self, d: Path):
        return self._train_victim(d, self.state["train"], "control")

    def _load_control(self):
        self._load_victim_like("control", "control")

    def _run_victim(self, d: Path):
        return self._train_victim(d, self.state["poisoned"], "victim")

    def _load_victim(self):
        self._load_victim_like("victim", "victim")

    # -- metrics ----------------------------------------------------------
    def _eval_set(self):
        test, trig = self.state["test"], self.state["trig_test"]
        lim = self.cfg.metrics.eval_limit
        if lim is not None and lim < len(test):
            idx = np.sort(T.make_rng(self.cfg.seeds.data, "eval").permutation(len(test))[:lim])
            return test.subset(idx), trig.subset(idx)
        return test, trig

    def _run_metrics(self, d: Path):
        c = self.cfg
        f, g = self.state["victim"], self.state["control"]
        test, trig = self._eval_set()
        lp = c.target
        sim = measure_similarity_k(trig, trig.mask if trig.mask is not None else None)
        tau = measure_c3_tau(f, g, test, trig, lp) if c.metrics.tau else 0.0
        tau_grey = measure_c3_tau(f, g, test, trig, lp, offset=0.5) if c.metrics.tau else None
        vsc = 0.0
        if c.metrics.v_sc:
            k = min(c.metrics.v_sc_samples, len(test))
            idx = np.sort(T.make_rng(c.seeds.train, "v_sc").permutation(len(test))[:k])
            vsc = v_sc(test.subset(idx), trig.subset(idx), c.training.v_sc_config(),
                       c.seeds.train, c.trigger.f2_channels)
        cond = ConditionReport(
            epsilon_c1=measure_c1_epsilon(g, test, trig, lp),
            similarity_k=sim["k"], tau_c3=tau, v_adv=v_adv(g, test, trig), v_sc=vsc,
            clean_acc=eval_accuracy(f, test), target_acc=eval_accuracy(f, test, lp),
            asr=eval_asr(f, test, trig, lp), similarity_k_region=sim.get("k_region"),
            tau_c3_grey=tau_grey)
        control = {"clean_acc": eval_accuracy(g, test), "target_acc": eval_accuracy(g, test, lp),
                   "asr": eval_asr(g, test, trig, lp)}
        diag = {}
        if trig.mask is not None and trig.mask.values.any() and not trig.mask.values.all():
            region = trig.mask.complement
            sc = TriggerSet(trig.perturbations * region, trig.eta, trig.kind)
            adv = TriggerSet(trig.perturbations * trig.mask.values, trig.eta, trig.kind)
            diag = {"asr_shortcut_part": eval_asr(f, test, sc, lp),
                    "asr_adversarial_part": eval_asr(f, test, adv, lp),
                    "control_asr_shortcut_part": eval_asr(g, test, sc, lp),
                    "control_asr_adversarial_part": eval_asr(g, test, adv, lp)}
        flags = np.asarray(self.state["plan"].selected_indices, dtype=np.int64)
        if flags.size:
            diag["poisoned_train_fit"] = float(
                (np.argmax(f.predict_proba(self.state["poisoned"].images[flags]), 1) == lp).mean())
        out = {"condition": cond.to_dict(), "control": control, "diagnostics": diag,
               "n_eval": len(test)}
        _write_json(d / "metrics.json", out)
        (d / "condition.csv").write_text(cond.to_csv())
        self.state["metrics"] = out
        return [d / "metrics.json", d / "condition.csv"]

    def _load_metrics(self):
        self.state["metrics"] = json.loads((self.stage_dir("metrics") / "metrics.json").read_text())

    # -- bounds -----------------------------------------------------------
    def _candidates(self):
        c = self.cfg
        nets = [self.state["victim"], self.state["control"]]
        spec = self._spec(c.victim)
        nets += [build(spec, 100_000 + c.seeds.train * 1000 + i)
                 for i in range(c.bounds.rad_candidates)]
        return nets

    def _rad(self, nets, ds: Dataset, tag: str) -> dict:
        c = self.cfg
        if len(ds) == 0:
            return {"value": 0.0, "stderr": 0.0, "exact": True, "num_sigma": 0,
                    "lower_estimate": True}
        k = min(c.bounds.rad_samples, len(ds))
        idx = np.sort(T.make_rng(c.seeds.train, "rad", tag).permutation(len(ds))[:k])
        sub = ds.subset(idx)
        vals = np.array([net.predict_proba(sub.images)[np.arange(k), sub.labels]
                         for net in nets], dtype=np.float64)
        est = empirical_rademacher(vals, num_sigma=c.bounds.num_sigma, seed=c.seeds.train,
                                   method="mc" if k > 20 else "auto")
        return est.to_dict()

    def _run_bounds(self, d: Path):
        c = self.cfg
        f = self.state["victim"]
        dp = self.state["poisoned"]
        lp = c.target
        nets = self._candidates()
        pred = np.concatenate([np.argmax(f.predict_proba(dp.images[i:i + 512]), 1)
                               for i in range(0, len(dp), 512)])
        emp_error = float((pred != dp.labels).mean())
        emp_risk = empirical_risk(f, dp)
        is_t = dp.labels == lp
        rad_neq = self._rad(nets, dp.subset(np.flatnonzero(~is_t)), "neq")
        rad_eq = self._rad(nets, dp.subset(np.flatnonzero(is_t)), "eq")
        rad_all = self._rad(nets, dp, "all")
        cond = self.state["metrics"]["condition"]
        vs = self._spec(c.victim)
        inp = BoundInputs(N=len(dp), alpha=c.alpha, eta_frac=float(is_t.mean()),
                          delta=c.bounds.delta, lam=c.bounds.lam, epsilon=cond["epsilon_c1"],
                          tau=cond["tau_c3"], emp_error=emp_error, emp_risk=emp_risk,
                          rad_neq=rad_neq["value"], rad_eq=rad_eq["value"], W=vs.width,
                          D=vs.depth, m=vs.classes, n=vs.n_inputs, A=c.bounds.A,
                          c_scale=c.bounds.c_scale)
        out = {"inputs": inp.to_dict(),
               "rademacher": {"neq": rad_neq, "eq": rad_eq, "all": rad_all,
                              "note": "finite candidate class; lower estimate"},
               "clean": clean_bound_rhs(inp).to_dict(),
               "capacity": capacity_report(inp).to_dict(),
               "lambda_note": "lambda is argued to be near 1, not measured"}
        for form in ("plain", "doubled"):
            try:
                out[f"poison_{form}"] = poison_bound_rhs(inp, rad_all["value"], form).to_dict()
            except ValueError as exc:
                out[f"poison_{form}"] = {"error": str(exc)}
        _write_json(d / "bounds.json", out)
        self.state["bounds"] = out
        return [d / "bounds.json"]

    def _load_bounds(self):
        self.state["bounds"] = json.loads((self.stage_dir("bounds") / "bounds.json").read_text())

    # -- report -----------------------------------------------------------
    def write_report(self) -> RunReport:
        c = self.cfg
        trig = self.state["trig_train"]
        train_hist = {k: [r for r in self.state[k + "_history"].rows]
                      for k in ("victim", "control")}
        data = {
            "schema_version": SCHEMA_VERSION,
            "name": c.name,
            "target_label": report_label(c.target),
            "alpha": c.alpha,
            "trigger": {"kind": trig.kind, "eta": trig.eta, "norm": trig.norm,
                        "max_linf": trig.max_linf(),
                        "mean_abs": float(np.abs(trig.perturbations).astype(np.float64).mean()),
                        "poisoned": len(self.state["plan"].selected_indices)},
            "condition": self.state["metrics"]["condition"],
            "control": self.state["metrics"]["control"],
            "diagnostics": self.state["metrics"]["diagnostics"],
            "bounds": self.state["bounds"],
            "final_train": {k: v[-1] for k, v in train_hist.items()},
            "recipes": {"desk": {"victim": c.training.victim, "f1": c.training.f1,
                                 "f2": c.training.f2},
                        "reference": {"victim": REFERENCE_VICTIM.to_dict(),
                                      "f1": REFERENCE_F1.to_dict(), "f2": REFERENCE_F2.to_dict()}},
            "flags": [SHAPE_FLAG + " (capacity terms)"],
        }
        rep = RunReport(data)
        path = self.root / "report.json"
        path.write_text(rep.to_json())
        self.manifest.record_output(path)
        self.manifest.record_output(self.root / "config.json")
        report(self.root)
        return rep


def run_pipeline(config: RunConfig, out_dir, cache_dirs=(), until: str = "bounds"):
    """Run (or resume) every stage up to ``until``; returns the RunReport after a full run."""
    return Pipeline(config, out_dir, cache_dirs).run(until)


# --------------------------------------------------------------------------
# sweeps


SWEEP_AXES = {"alpha": "alpha", "eta": "trigger.eta", "trigger_kind": "trigger.kind"}
SWEEP_COLUMNS = ["value", "status", "clean_acc", "target_acc", "asr", "control_clean_acc",
                 "control_asr", "epsilon_c1", "similarity_k", "tau_c3", "v_adv", "v_sc",
                 "max_linf", "clean_coefficient", "clean_bound", "poison_bound"]


def _sweep_row(value, rep: RunReport | None, status: str, alpha=None) -> dict:
    row = {c: "" for c in SWEEP_COLUMNS}
    row.update(value=value, status=status)
    if alpha is not None:
        try:
            row["clean_coefficient"] = clean_coefficient(alpha)
        except ValueError:
            row["clean_coefficient"] = "rejected"
    if rep is None:
        return row
    d = rep.data
    cond = d["condition"]
    row.update({k: cond[k] for k in ("clean_acc", "target_acc", "asr", "epsilon_c1",
                                     "similarity_k", "tau_c3", "v_adv", "v_sc")})
    row.update(control_clean_acc=d["control"]["clean_acc"], control_asr=d["control"]["asr"],
               max_linf=d["trigger"]["max_linf"],
               clean_bound=d["bounds"]["clean"]["total"],
               poison_bound=d["bounds"]["poison_doubled"].get("total", ""))
    return row


def sweep(config: RunConfig, axis: str, values, out_dir, cache_dirs=()) -> Path:
    """One run per value with shared seeds; writes ``sweep.csv`` and returns its path."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, done = [], list(cache_dirs)
    for v in values:
        alpha = v if axis == "alpha" else config.alpha
        try:
            cfg = config.replace(**{SWEEP_AXES[axis]: v})
        except ConfigError as exc:
            rows.append(_sweep_row(v, None, f"rejected: {exc}", alpha))
            continue
        run_dir = out / f"{axis}={v}"
        rep = run_pipeline(cfg, run_dir, cache_dirs=done)
        done.append(run_dir)
        rows.append(_sweep_row(v, rep, "ok", alpha))
    path = out / "sweep.csv"
    buf = io.StringIO()
    wr = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue())
    _write_json(out / "sweep.json", {"axis": axis, "values": list(values)})
    return path


# --------------------------------------------------------------------------
# report / charts


def _svg_lines(title: str, xlabel: str, series: dict, path: Path) -> None:
    """Minimal deterministic SVG line chart; ``series`` maps name -> (xs, ys)."""
    w, h, pad = 480, 300, 45
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)
           if y is not None and math.isfinite(y)]
    if not pts:
        return
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(0.0, min(p[1] for p in pts)), max(1.0, max(p[1] for p in pts))
    x1 = x1 if x1 > x0 else x0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(y):
        return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
           f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
           f'<text x="5" y="{pad}" font-size="10">{y1:.3g}</text>',
           f'<text x="5" y="{h - pad}" font-size="10">{y0:.3g}</text>']
    for i, (name, (xs, ys)) in enumerate(sorted(series.items())):
        col = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                          if y is not None and math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{w - pad - 90}" y="{pad + 14 * i}" font-size="11" '
                   f'fill="{col}">{name}</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")


def report(run_dir) -> list[Path]:
    """Verify the manifest, then emit summary JSON, metric CSVs and SVG charts.

    Works on a pipeline run directory or a sweep directory (``sweep.csv``).
    """
    root = Path(run_dir)
    files: list[Path] = []
    charts = root / "charts"
    if (root / "sweep.csv").exists():
        text = (root / "sweep.csv").read_text()
        rows = list(csv.DictReader(io.StringIO(text)))
        meta = json.loads((root / "sweep.json").read_text()) if (root / "sweep.json").exists() \
            else {"axis": "value"}
        for r in rows:
            sub = root / f"{meta['axis']}={r['value']}"
            if r["status"] == "ok" and sub.exists():
                Manifest(sub).verify()
        files.append(root / "sweep.csv")
        ok = [r for r in rows if r["status"] == "ok"]
        try:
            xs = [float(r["value"]) for r in ok]
        except ValueError:
            xs = list(range(len(ok)))
        if ok:
            charts.mkdir(exist_ok=True)
            series = {k: (xs, [float(r[k]) for r in ok])
                      for k in ("clean_acc", "asr", "control_clean_acc") if r[k] != ""}
            p = charts / "sweep_metrics.svg"
            _svg_lines(f"metrics vs {meta['axis']}", meta["axis"], series, p)
            files.append(p)
        return files

    manifest = Manifest(root)
    if not manifest.path.exists():
        raise ManifestError(f"no manifest in {root}")
    manifest.verify()
    rep = json.loads((root / "report.json").read_text())
    summary = {"asr": rep["condition"]["asr"], "clean_acc": rep["condition"]["clean_acc"],
               "control_clean_acc": rep["control"]["clean_acc"],
               "control_asr": rep["control"]["asr"],
               "clean_bound": rep["bounds"]["clean"]["total"],
               "trigger": rep["trigger"]["kind"], "eta": rep["trigger"]["eta"]}
    p = root / "summary.json"
    _write_json(p, summary)
    files.append(p)
    p = root / "metrics.csv"
    p.write_text((root / "stage_metrics" / "condition.csv").read_text())
    files.append(p)
    charts.mkdir(exist_ok=True)
    for stage in ("victim", "control"):
        hist = _history_from_csv((root / f"stage_{stage}" / "history.csv").read_text())
        xs = [r["epoch"] for r in hist.rows]
        series = {"train acc": (xs, [r["acc"] for r in hist.rows]),
                  "train loss": (xs, [r["loss"] for r in hist.rows])}
        p = charts / f"{stage}_training.svg"
        _svg_lines(f"{stage} training", "epoch", series, p)
        files.append(p)
    return files
