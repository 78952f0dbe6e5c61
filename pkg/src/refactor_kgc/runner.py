"""Training runs that can be checkpointed and resumed bit-for-bit."""

from __future__ import annotations

import numpy as np

from .checkpoint import CheckpointError
from .config import RunConfig
from .graph import KnowledgeGraph, load_features
from .refactor import RefactorTrainer, decoder_model, inductive_infer, random_features
from .scoring import FactorizationModel
from .training import FMTrainer


class CompatibilityError(Exception):
    pass


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class FMRun:
    mode = "fm"

    def __init__(self, cfg: RunConfig, train: KnowledgeGraph):
        self.cfg = cfg
        self.graph = train
        rng = np.random.default_rng(cfg.seed)
        model = FactorizationModel.initialize(cfg.model_spec(), train.num_entities, train.num_relations, rng)
        self.trainer = FMTrainer(model, cfg.train_config(), train.triples, train.num_base_relations, rng)

    @property
    def step(self) -> int:
        return self.trainer.step

    @property
    def epoch(self) -> int:
        return self.trainer.epoch

    def run_epoch(self, on_step=None) -> float:
        def forward(rec):
            on_step(rec.step, rec.loss, rec.did_forget)

        return self.trainer.run_epoch(forward if on_step else None)

    def eval_model(self) -> FactorizationModel:
        return self.trainer.model

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.trainer.model.params)
        out.update({f"accum.{k}": v for k, v in self.trainer.state.accumulator.items()})
        return out

    def state_header(self) -> dict:
        return {
            "step": self.trainer.step,
            "epoch": self.trainer.epoch,
            "rng_state": self.trainer.rng.bit_generator.state,
            "step_count": self.trainer.state.step_count,
        }

    def restore(self, header: dict, arrays: dict) -> None:
        model = self.trainer.model
        for name in model.params:
            if name not in arrays or arrays[name].shape != model.params[name].shape:
                raise CompatibilityError(f"checkpoint table {name!r} missing or mis-shaped")
            model.params[name] = arrays[name].copy()
            self.trainer.state.accumulator[name] = arrays.get(f"accum.{name}", np.zeros_like(model.params[name])).copy()
        self.trainer.state.step_count = {k: int(v) for k, v in header["step_count"].items()}
        self.trainer.step = int(header["step"])
        self.trainer.epoch = int(header["epoch"])
        self.trainer.rng = _rng_from_state(header["rng_state"])


class RefactorRun:
    mode = "refactor"

    def __init__(self, cfg: RunConfig, train: KnowledgeGraph, features: np.ndarray | None = None):
        self.cfg = cfg
        self.graph = train
        self.rcfg = cfg.refactor_config()
        if features is None:
            features = initial_features(cfg, train)
        self.trainer = RefactorTrainer(train, features, self.rcfg)

    @property
    def step(self) -> int:
        return self.trainer.step

    @property
    def epoch(self) -> int:
        return self.trainer.epoch

    def run_epoch(self, on_step=None) -> float:
        def forward(rec):
            # a cache clear is reported after the pass; attach it to the last step
            if rec.cleared:
                on_step(rec.step, None, True)
            else:
                on_step(rec.step, rec.loss, False)

        return self.trainer.run_epoch(forward if on_step else None)

    def node_states(self) -> np.ndarray:
        if self.rcfg.layers is None:
            return self.trainer.cache.states
        return inductive_infer(self.trainer.psi, self.graph, self.trainer.cache.initial, self.rcfg)

    def eval_model(self) -> FactorizationModel:
        return decoder_model(self.rcfg.decoder, self.node_states(), self.trainer.psi)

    def arrays(self) -> dict[str, np.ndarray]:
        c = self.trainer.cache
        return {
            "relation": self.trainer.psi,
            "accum.relation": self.trainer.psi_accumulator,
            "features": c.initial,
            "cache.states": c.states,
            "cache.accumulator": c.accumulator,
        }

    def state_header(self) -> dict:
        c = self.trainer.cache
        return {
            "step": self.trainer.step,
            "epoch": self.trainer.epoch,
            "rng_state": self.trainer.rng.bit_generator.state,
            "cache": {
                "layer_counter": c.layer_counter,
                "batches_since_clear": c.batches_since_clear,
                "passes_since_clear": c.passes_since_clear,
            },
        }

    def restore(self, header: dict, arrays: dict) -> None:
        t = self.trainer
        if arrays["relation"].shape != t.psi.shape or arrays["cache.states"].shape != t.cache.states.shape:
            raise CompatibilityError("checkpoint shapes do not match the graph")
        t.psi = arrays["relation"].copy()
        t.psi_accumulator = arrays["accum.relation"].copy()
        t.cache.states = arrays["cache.states"].copy()
        t.cache.accumulator = arrays["cache.accumulator"].copy()
        for k, v in header["cache"].items():
            setattr(t.cache, k, int(v))
        t.step = int(header["step"])
        t.epoch = int(header["epoch"])
        t.rng = _rng_from_state(header["rng_state"])


def initial_features(cfg: RunConfig, graph: KnowledgeGraph, spec: str | None = None) -> np.ndarray:
    """Features from ``spec`` (``random:SEED`` or ``file:PATH``) or from the config."""
    if spec is None:
        spec = f"file:{cfg.features_path}" if cfg.feature_source == "file" else f"random:{cfg.feature_seed}"
    kind, _, value = spec.partition(":")
    if kind == "random":
        try:
            seed = int(value)
        except ValueError:
            raise ValueError(f"bad feature seed in {spec!r}") from None
        return random_features(graph.num_entities, cfg.dim, seed, cfg.feature_scale)
    if kind == "file":
        if not value or value == "None":
            raise ValueError("feature_source=file needs features_path")
        x = load_features(value, graph)
        if x.shape[1] != cfg.dim:
            raise CompatibilityError(f"feature dim {x.shape[1]} != model dim {cfg.dim}")
        return x
    raise ValueError(f"features must be 'random:SEED' or 'file:PATH', got {spec!r}")


def build_run(cfg: RunConfig, train: KnowledgeGraph, features: np.ndarray | None = None):
    if cfg.mode == "fm":
        return FMRun(cfg, train)
    return RefactorRun(cfg, train, features)


def run_header(run) -> dict:
    cfg = run.cfg
    g = run.graph
    return {
        "mode": cfg.mode,
        "family": cfg.model,
        "entity_dim": cfg.dim,
        "relation_dim": cfg.model_spec().relation_dim,
        "num_entities": g.num_entities,
        "num_relations": g.num_relations,
        "num_base_relations": g.num_base_relations,
        "relations": g.relations.names[: g.num_base_relations],
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        **run.state_header(),
    }


def check_compatible(header: dict, train: KnowledgeGraph) -> None:
    if header["num_entities"] != train.num_entities or header["num_relations"] != train.num_relations:
        raise CompatibilityError(
            f"checkpoint vocab ({header['num_entities']} entities, {header['num_relations']} relations) "
            f"does not match data ({train.num_entities}, {train.num_relations})"
        )


def restore_run(header: dict, arrays: dict, train: KnowledgeGraph):
    """Rebuild a run from a checkpoint using only its config echo."""
    cfg = RunConfig.from_dict(header["config"])
    check_compatible(header, train)
    if cfg.mode == "refactor":
        run = RefactorRun(cfg, train, arrays["features"])
    else:
        run = FMRun(cfg, train)
    try:
        run.restore(header, arrays)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from None
    return run
