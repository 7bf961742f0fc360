"""In-process federated training (FedAvg / FedSGD) with interceptable rounds."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import unet
from .unet import ModelWeights

log = logging.getLogger(__name__)

FEDAVG, FEDSGD = "FedAvg", "FedSGD"


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 2
    rounds: int = 200
    local_epochs: int = 2
    batch_size: int = 10
    lr: float = 0.01
    mode: str = FEDAVG
    seed: int = 0
    snapshot_rounds: tuple | None = None  # None -> final round only

    def __post_init__(self):
        if self.num_clients < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("client, epoch and batch counts must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in (FEDAVG, FEDSGD):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ClientDataset:
    images: np.ndarray  # (N, H, W) in [0, 1]
    masks: np.ndarray  # (N, H, W) in {0, 1}
    classes: list = field(default_factory=list)
    scales: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.images.shape != self.masks.shape or self.images.ndim != 3:
            raise ValueError(f"images {self.images.shape} and masks {self.masks.shape} must match (N,H,W)")
        if not np.isin(self.masks, (0.0, 1.0)).all():
            raise ValueError("masks must be binary")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_dataset(cls, ds) -> "ClientDataset":
        x, y = ds.arrays()
        return cls(x, y, [m.cls for m in ds.masks], [m.scale for m in ds.masks])


@dataclass(frozen=True)
class RoundSnapshot:
    round: int
    client: int
    w_prev: ModelWeights
    w_curr: ModelWeights
    true_lr: float = field(repr=False, default=float("nan"))


class AttackerView(NamedTuple):
    w_prev: ModelWeights
    w_curr: ModelWeights


def attacker_view(snapshot: RoundSnapshot) -> AttackerView:
    """What an honest-but-curious server observes: weights only."""
    return AttackerView(snapshot.w_prev, snapshot.w_curr)


def dataset_loss(weights: ModelWeights, data: ClientDataset) -> float:
    pred = unet.forward(weights, data.images)
    return unet.seg_loss(pred, data.masks).item()


def local_train(
    weights: ModelWeights,
    data: ClientDataset,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator | int = 0,
) -> ModelWeights:
    """Plain minibatch SGD over seeded shuffles of the client's data."""
    if len(data) == 0:
        raise ValueError("local_train: empty dataset")
    if batch_size > len(data):
        log.info("batch_size=%d clamped to dataset size %d", batch_size, len(data))
        batch_size = len(data)
    rng = np.random.default_rng(rng)
    params = {k: np.array(v) for k, v in weights.items()}
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start : start + batch_size]
            _, grads = unet.loss_and_grads(weights.replace(params), data.images[idx], data.masks[idx])
            for k in params:
                params[k] = params[k] - lr * grads[k]
    return weights.replace(params)


def fedsgd_step(weights: ModelWeights, data: ClientDataset, lr: float) -> ModelWeights:
    _, grads = unet.loss_and_grads(weights, data.images, data.masks)
    return weights.replace({k: weights[k] - lr * grads[k] for k in weights})


def fedavg_aggregate(client_weights: Sequence[ModelWeights], counts: Sequence[float]) -> ModelWeights:
    """Sample-count-weighted mean of each parameter."""
    if not client_weights or len(client_weights) != len(counts):
        raise ValueError("need one positive count per client weight set")
    if any(c <= 0 for c in counts):
        raise ValueError("sample counts must be positive")
    ref = client_weights[0]
    for w in client_weights[1:]:
        if not ref.congruent(w):
            raise ValueError("client weight structures differ")
    if len(set(counts)) == 1:
        coef = [1.0 / len(counts)] * len(counts)
    else:
        total = float(sum(counts))
        coef = [c / total for c in counts]
    out = {}
    for k in ref:
        acc = coef[0] * client_weights[0][k]
        for c, w in zip(coef[1:], client_weights[1:]):
            acc = acc + c * w[k]
        out[k] = acc
    return ref.replace(out)


@dataclass
class FederationResult:
    snapshots: list
    final: ModelWeights
    initial: ModelWeights
    losses: list  # (round, client, loss of the round's starting global model)
    final_losses: list  # per client, loss of the final global model


def _client_rng(seed: int, rnd: int, client: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rnd, client]))


def run_federation(
    config: FLConfig,
    datasets: Sequence[ClientDataset],
    arch=None,
    initial: ModelWeights | None = None,
    intercept: Callable[[RoundSnapshot], None] | None = None,
) -> FederationResult:
    """Distribute -> train locally -> aggregate, ``config.rounds`` times.

    ``intercept`` receives every (round, client) snapshot as it is produced;
    it cannot alter the run.
    """
    if len(datasets) != config.num_clients:
        raise ValueError(f"expected {config.num_clients} client datasets, got {len(datasets)}")
    if initial is None:
        arch = arch or unet.UNetConfig(image_size=datasets[0].images.shape[-1])
        initial = unet.init_weights(arch, config.seed)
    keep = {config.rounds} if config.snapshot_rounds is None else set(config.snapshot_rounds)

    global_w = initial
    snapshots, losses = [], []
    for rnd in range(1, config.rounds + 1):
        updates = []
        for cid, data in enumerate(datasets):
            losses.append((rnd, cid, dataset_loss(global_w, data)))
            if config.mode == FEDSGD:
                new_w = fedsgd_step(global_w, data, config.lr)
            else:
                new_w = local_train(
                    global_w, data, config.local_epochs, config.batch_size, config.lr,
                    _client_rng(config.seed, rnd, cid),
                )
            updates.append(new_w)
            snap = RoundSnapshot(rnd, cid, global_w, new_w, config.lr)
            if intercept is not None:
                intercept(snap)
            if rnd in keep:
                snapshots.append(snap)
        global_w = fedavg_aggregate(updates, [len(d) for d in datasets])
        log.debug("round=%d loss=%s", rnd, [round(l[2], 6) for l in losses[-len(datasets):]])
    final_losses = [dataset_loss(global_w, d) for d in datasets]
    return FederationResult(snapshots, global_w, initial, losses, final_losses)


# ---------------------------------------------------------------------------
# snapshot files: weight pairs plus a JSON round manifest


def save_snapshots(snapshots: Sequence[RoundSnapshot], outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in snapshots:
        stem = f"round{s.round:04d}_client{s.client}"
        unet.save_weights(s.w_prev, outdir / f"{stem}_prev.bin")
        unet.save_weights(s.w_curr, outdir / f"{stem}_curr.bin")
        entries.append(
            {"round": s.round, "client": s.client, "prev": f"{stem}_prev.bin", "curr": f"{stem}_curr.bin"}
        )
    manifest = outdir / "snapshots.json"
    manifest.write_text(json.dumps({"snapshots": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_snapshots(manifest) -> list[tuple[int, int, AttackerView]]:
    """(round, client, view) for every entry; the files never carry the client lr."""
    manifest = Path(manifest)
    entries = json.loads(manifest.read_text())["snapshots"]
    out = []
    for e in entries:
        view = AttackerView(
            unet.load_weights(manifest.parent / e["prev"]),
            unet.load_weights(manifest.parent / e["curr"]),
        )
        out.append((e["round"], e["client"], view))
    return out
