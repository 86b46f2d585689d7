"""Federated CycleGAN training with generator-only FedAvg and DP gradients.

Each round the server broadcasts its two generators, every client trains
them together with its own private pair of critics, and the server replaces
its generators with the proportion-weighted average of the client
generators. Critics never leave their client; the server state has no place
to hold them.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .atm import TRANSFORM_TYPES, atm_sample_views
from .losses import (
    DiscriminatorComponents,
    GeneratorComponents,
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    atl_components,
    cycle_loss,
    total_discriminator_loss,
    total_generator_loss,
)
from .mud import PROPORTION_TOL, ClientDataset
from .networks import (
    Discriminator,
    NetConfig,
    UNetGenerator,
    generator_param_count,
    init_discriminator,
    init_generator,
    parameters_as_vector,
    vector_to_parameters,
)

log = logging.getLogger(__name__)


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DPConfig:
    """Per-step gradient clipping and Gaussian noise for generator updates.

    The noise standard deviation per coordinate is
    ``noise_multiplier * clip_bound``. ``sensitivity`` is recorded for
    reference and does not enter the noise scale.
    """

    clip_bound: float = 1.0
    sensitivity: float = 2.0
    noise_multiplier: float = 1.07
    enabled: bool = False

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_bound


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 3
    local_epochs: int = 3
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    views_k: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    resample_noise: bool = False

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class LossRecord:
    round: int
    client: str
    epoch: int
    step: int
    phase: str  # "d" (critic update) or "g" (generator update)
    values: dict[str, float]


@dataclass
class ClientState:
    client_id: str
    dataset: ClientDataset
    proportion: float
    disc_a: Discriminator   # judges modality A (output of gen_ba)
    disc_b: Discriminator   # judges modality B (output of gen_ab)
    gen_ab: UNetGenerator | None = None
    gen_ba: UNetGenerator | None = None
    disc_opts: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    noise_rng: torch.Generator = field(default_factory=torch.Generator)


@dataclass
class ServerState:
    gen_ab: UNetGenerator
    gen_ba: UNetGenerator
    round_index: int = 0
    registry: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.registry and abs(sum(self.registry.values()) - 1.0) > PROPORTION_TOL:
            raise ValueError(f"registered proportions sum to {sum(self.registry.values())!r}, not 1")


# --- differential privacy -------------------------------------------------------

def clip_gradient(grad: torch.Tensor, bound: float) -> torch.Tensor:
    """Scale ``grad`` by ``min(1, bound / ||grad||)``."""
    if not bound > 0:
        raise ValueError("clip bound must be > 0")
    norm = torch.linalg.vector_norm(grad.double()).item()
    if norm <= bound:
        return grad.clone()
    return grad * (bound / norm)


def add_dp_noise(grad: torch.Tensor, dp: DPConfig, rng: torch.Generator) -> torch.Tensor:
    if dp.noise_multiplier == 0:
        return grad.clone()
    noise = torch.randn(grad.shape, generator=rng, dtype=grad.dtype)
    return grad + noise * dp.noise_std


def privatize_gradients(model: torch.nn.Module, dp: DPConfig, rng: torch.Generator) -> None:
    """Clip then noise the model's whole flattened gradient, in place."""
    params = [p for p in model.parameters() if p.grad is not None]
    flat = torch.cat([p.grad.reshape(-1) for p in params])
    flat = add_dp_noise(clip_gradient(flat, dp.clip_bound), dp, rng)
    offset = 0
    for p in params:
        p.grad.copy_(flat[offset:offset + p.numel()].view_as(p))
        offset += p.numel()


# --- aggregation ------------------------------------------------------------------

def fedavg_aggregate(entries: Sequence[tuple[torch.nn.Module, float]]) -> torch.nn.Module:
    """Coordinate-wise proportion-weighted mean of the models' parameters.

    Accumulates in float64 so averaging identical models returns them exactly.
    """
    if not entries:
        raise ValueError("nothing to aggregate")
    props = [float(p) for _, p in entries]
    if abs(sum(props) - 1.0) > PROPORTION_TOL:
        raise ValueError(f"aggregation weights must sum to 1, got {sum(props)!r}")
    template = entries[0][0]
    vecs = [parameters_as_vector(m) for m, _ in entries]
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValueError("cannot average models with different parameter counts")
    acc = torch.zeros(vecs[0].shape, dtype=torch.float64)
    for v, p in zip(vecs, props):
        acc += p * v.double()
    return vector_to_parameters(acc.to(vecs[0].dtype), template)


# --- local training ---------------------------------------------------------------

def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


def make_client(dataset: ClientDataset, config: TrainConfig, index: int) -> ClientState:
    seed = config.seed
    net = config.net
    disc_a = init_discriminator(net.disc_base, net.disc_layers, seed=seed * 1000 + 10 * index + 1)
    disc_b = init_discriminator(net.disc_base, net.disc_layers, seed=seed * 1000 + 10 * index + 2)
    client = ClientState(
        client_id=dataset.client_id,
        dataset=dataset,
        proportion=dataset.proportion,
        disc_a=disc_a,
        disc_b=disc_b,
        rng=np.random.default_rng([seed, index, 7]),
        noise_rng=torch.Generator().manual_seed(seed * 1000 + index),
    )
    client.disc_opts = {"a": _adam(disc_a.parameters(), config), "b": _adam(disc_b.parameters(), config)}
    return client


def _aux_kinds(w: LossWeights, phase: str) -> list[str]:
    prefix = "d_" if phase == "d" else ""
    return [k for k in TRANSFORM_TYPES if getattr(w, prefix + k) > 0]


def _check_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value):
        raise TrainingDivergenceError(f"non-finite loss at {where}")


def _as_float(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def discriminator_step(client: ClientState, gen_ab, gen_ba, x, y, config: TrainConfig) -> dict[str, float]:
    w = config.weights
    kinds = _aux_kinds(w, "d")
    with torch.no_grad():
        fake_b, fake_a = gen_ab(x), gen_ba(y)
    for opt in client.disc_opts.values():
        opt.zero_grad(set_to_none=True)
    total = 0.0
    record = {}
    for name, disc, real, fake in (("b", client.disc_b, y, fake_b), ("a", client.disc_a, x, fake_a)):
        realness = disc.realness(torch.cat([real, fake]))
        comps = DiscriminatorComponents(adv=adversarial_loss_d(realness[:len(real)], realness[len(real):]))
        if kinds:
            views = [atm_sample_views(real.squeeze(1).numpy(), config.views_k, client.rng, "real"),
                     atm_sample_views(fake.squeeze(1).numpy(), config.views_k, client.rng, "fake")]
            aux = atl_components(disc, views, "discriminator", kinds)
            for k, v in aux.items():
                setattr(comps, k, v)
        loss = total_discriminator_loss(comps, w)
        total = total + loss
        record[f"adv_{name}"] = _as_float(comps.adv)
        for k in TRANSFORM_TYPES:
            record[f"{k}_{name}"] = _as_float(getattr(comps, k))
    total.backward()
    for opt in client.disc_opts.values():
        opt.step()
    record["total"] = _as_float(total)
    return record


def generator_step(client: ClientState, gen_opts, x, y, config: TrainConfig, dp: DPConfig) -> dict[str, float]:
    w = config.weights
    gen_ab, gen_ba = client.gen_ab, client.gen_ba
    for opt in gen_opts:
        opt.zero_grad(set_to_none=True)
    discs = (client.disc_a, client.disc_b)
    for d in discs:
        d.requires_grad_(False)
    try:
        fake_b, fake_a = gen_ab(x), gen_ba(y)
        rec_x, rec_y = gen_ba(fake_b), gen_ab(fake_a)
        comps = GeneratorComponents(
            adv=adversarial_loss_g(client.disc_b.realness(fake_b)) + adversarial_loss_g(client.disc_a.realness(fake_a)),
            cyc=cycle_loss(x, rec_x, y, rec_y, 1.0),
        )
        kinds = _aux_kinds(w, "g")
        if kinds:
            # views of real samples only: these terms carry no generator gradient
            with torch.no_grad():
                for disc, real in ((client.disc_b, y), (client.disc_a, x)):
                    views = [atm_sample_views(real.squeeze(1).numpy(), config.views_k, client.rng, "real")]
                    for k, v in atl_components(disc, views, "generator", kinds).items():
                        setattr(comps, k, getattr(comps, k) + v)
        loss = total_generator_loss(comps, w)
        _check_finite(loss, "generator update")
        loss.backward()
    finally:
        for d in discs:
            d.requires_grad_(True)
    if dp.enabled:
        privatize_gradients(gen_ab, dp, client.noise_rng)
        privatize_gradients(gen_ba, dp, client.noise_rng)
    for opt in gen_opts:
        opt.step()
    record = {k: _as_float(getattr(comps, k)) for k in ("adv", "cyc", "rot", "trans", "scale")}
    record["total"] = _as_float(loss)
    return record


def local_train(client: ClientState, global_gens: tuple[UNetGenerator, UNetGenerator], config: TrainConfig,
                dp: DPConfig, round_index: int = 0, records: list | None = None,
                corpus=None) -> ClientState:
    """Run ``config.local_epochs`` epochs of alternating critic/generator updates.

    The client starts from copies of the broadcast generators with fresh
    generator optimizers; its critics and their optimizer moments persist
    across rounds.
    """
    g_ab, g_ba = global_gens
    expected = generator_param_count(config.net.gen_depth, config.net.gen_base)
    for g in (g_ab, g_ba):
        if parameters_as_vector(g).numel() != expected:
            raise ValueError(f"client {client.client_id}: broadcast generator has "
                             f"{parameters_as_vector(g).numel()} parameters, template has {expected}")
    client.gen_ab, client.gen_ba = copy.deepcopy(g_ab), copy.deepcopy(g_ba)
    gen_opts = [_adam(client.gen_ab.parameters(), config), _adam(client.gen_ba.parameters(), config)]
    dataset = client.dataset
    n = len(dataset)
    if n == 0:
        return client
    step = 0
    for epoch in range(config.local_epochs):
        if config.resample_noise and corpus is not None and epoch > 0:
            from .mud import redistort

            dataset = client.dataset = redistort(dataset, corpus, client.rng)
        a, b = dataset.arrays()
        order = client.rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = torch.from_numpy(a[idx]).unsqueeze(1)
            y = torch.from_numpy(b[idx]).unsqueeze(1)
            where = f"round {round_index}, client {client.client_id}, epoch {epoch}, step {step}"
            d_rec = discriminator_step(client, client.gen_ab, client.gen_ba, x, y, config)
            if not math.isfinite(d_rec["total"]):
                raise TrainingDivergenceError(f"non-finite critic loss at {where}")
            try:
                g_rec = generator_step(client, gen_opts, x, y, config, dp)
            except TrainingDivergenceError:
                raise TrainingDivergenceError(f"non-finite generator loss at {where}") from None
            if records is not None:
                records.append(LossRecord(round_index, client.client_id, epoch, step, "d", d_rec))
                records.append(LossRecord(round_index, client.client_id, epoch, step, "g", g_rec))
            step += 1
    return client


def run_round(server: ServerState, clients: Sequence[ClientState], config: TrainConfig, dp: DPConfig,
              records: list | None = None, corpus=None) -> ServerState:
    """Broadcast, train every client in id order, average each generator direction."""
    missing = [c.client_id for c in clients if c.client_id not in server.registry]
    if missing:
        raise ValueError(f"clients {missing} are not registered with the server")
    round_index = server.round_index + 1
    for client in sorted(clients, key=lambda c: c.client_id):
        log.info("round %d: training %s on %d pairs", round_index, client.client_id, len(client.dataset))
        local_train(client, (server.gen_ab, server.gen_ba), config, dp, round_index, records, corpus)
    gen_ab = fedavg_aggregate([(c.gen_ab, server.registry[c.client_id]) for c in clients])
    gen_ba = fedavg_aggregate([(c.gen_ba, server.registry[c.client_id]) for c in clients])
    return ServerState(gen_ab, gen_ba, round_index, dict(server.registry))


def init_server(config: TrainConfig, clients: Sequence[ClientState]) -> ServerState:
    net = config.net
    return ServerState(
        gen_ab=init_generator(net.gen_depth, net.gen_base, seed=config.seed * 1000 + 901),
        gen_ba=init_generator(net.gen_depth, net.gen_base, seed=config.seed * 1000 + 902),
        registry={c.client_id: c.proportion for c in clients},
    )


@dataclass
class TrainingResult:
    server: ServerState
    clients: list[ClientState]
    records: list[LossRecord]
    history: list[ServerState]


def run_training(config: TrainConfig, dp: DPConfig, datasets: Sequence[ClientDataset],
                 on_round: Callable[[ServerState, list[ClientState]], None] | None = None,
                 corpus=None, records: list[LossRecord] | None = None) -> TrainingResult:
    """Create clients and server, then run ``config.rounds`` synchronous rounds.

    ``on_round`` is called with the initial state (round 0) and after every
    round; checkpoint writers hook in there. Pass ``records`` to keep the loss
    log reachable if training aborts.
    """
    torch.manual_seed(config.seed)
    clients = [make_client(ds, config, i) for i, ds in enumerate(datasets)]
    server = init_server(config, clients)
    records = [] if records is None else records
    history = [server]
    if on_round:
        on_round(server, clients)
    for _ in range(config.rounds):
        server = run_round(server, clients, config, dp, records, corpus)
        history.append(server)
        if on_round:
            on_round(server, clients)
    return TrainingResult(server, clients, records, history)
