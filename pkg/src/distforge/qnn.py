"""Two-stage quantile network, its benchmark siblings and the training protocol."""
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import LayerSpec, ParamStore, Sequential, adam_step, hidden_block
from .taus import tau_grid

log = logging.getLogger(__name__)

STOCK_INPUTS = 176
MARKET_INPUTS = 18
CLIP = -1.0


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8192
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    dropout: float = 0.2
    l1_first: float = 1e-4
    l1_second: float = 1e-5
    l2_market_first: float = 1e-5
    patience: int = 2
    val_fraction: float = 0.2
    ensemble_size: int = 20
    epoch_constant: float = 3_000_000
    max_epochs: int | None = None
    fine_tune: bool = True
    lr_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.ensemble_size < 1 or self.patience < 1:
            raise ValueError("batch size, ensemble size and patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0 or self.lr <= 0:
            raise ValueError("invalid dropout or learning rate")


@dataclass
class Batch:
    x: np.ndarray
    z: np.ndarray
    sigma_bar: np.ndarray
    r: np.ndarray

    def take(self, idx):
        return Batch(self.x[idx], self.z[idx], self.sigma_bar[idx], self.r[idx])

    def __len__(self):
        return self.r.shape[0]


def pinball_grad(taus, y, q):
    """Pinball losses and d(loss)/d(q) elementwise; the kink takes the tau side."""
    xi = y[:, None] - q
    pos = xi >= 0.0
    loss = np.where(pos, taus * xi, (taus - 1.0) * xi)
    dq = np.where(pos, -taus, 1.0 - taus)
    return loss, dq


def aggregated_loss(r, r_std, q_raw, q_std, taus):
    """Mean pinball loss over batch and taus, summed over the raw and standardised heads."""
    taus = np.asarray(taus, dtype=np.float64)
    lr, _ = pinball_grad(taus, np.asarray(r, dtype=np.float64), q_raw)
    ls, _ = pinball_grad(taus, np.asarray(r_std, dtype=np.float64), q_std)
    return float((lr.sum() + ls.sum()) / (lr.shape[0] * taus.size))


def raw_head_loss(r, q_raw, taus):
    lr, _ = pinball_grad(np.asarray(taus, dtype=np.float64), np.asarray(r, dtype=np.float64), q_raw)
    return float(lr.mean())


def epochs_for(n, A=3_000_000):
    if n <= 0:
        raise ValueError("observation count must be positive")
    return max(1, int(round(100.0 * A / n)))


# --------------------------------------------------------------------------
# models


class TwoStageNet:
    """Standardised-quantile subnetwork rescaled by sigma_bar and a market scalar."""

    kind = "two-stage"

    def __init__(self, n_stock=STOCK_INPUTS, n_market=MARKET_INPUTS, taus=None,
                 hidden=(128, 128, 4, 128, 128), market_hidden=8, dropout=0.2,
                 l1_first=1e-4, l1_second=1e-5, l2_market_first=1e-5,
                 bottleneck_dropout=True, seed=0):
        self.taus = tau_grid(taus)
        self.store = ParamStore()
        specs = []
        narrow = int(np.argmin(hidden))
        for i, w in enumerate(hidden):
            l1 = l1_first if i == 0 else l1_second if i == 1 else 0.0
            rate = dropout if bottleneck_dropout or i != narrow else 0.0
            specs += hidden_block(w, rate, l1=l1)
        specs.append(LayerSpec("dense", self.taus.size))
        self.stage1 = Sequential(specs, n_stock, self.store, "std", seed)
        mspecs = hidden_block(market_hidden, dropout, l1=l1_first, l2=l2_market_first)
        mspecs += [LayerSpec("dense", 1, l1=l1_second), LayerSpec("softplus")]
        self.market = Sequential(mspecs, n_market, self.store, "mkt", seed + 7919)
        self.config = dict(n_stock=n_stock, n_market=n_market, hidden=tuple(hidden),
                           market_hidden=market_hidden, dropout=dropout,
                           bottleneck_dropout=bottleneck_dropout)

    def forward(self, x, z, sigma_bar, train=False, rng=None):
        sigma_bar = np.asarray(sigma_bar, dtype=np.float64).reshape(-1, 1)
        if np.any(~(sigma_bar > 0)):
            raise InputError("sigma_bar must be positive")
        s = self.stage1.forward(x, train, rng)
        m = self.market.forward(z, train, rng)
        scale = sigma_bar * m
        raw_pre = s * scale
        # a -100% return is -1/sigma_bar in standardised units
        std_floor = CLIP / sigma_bar
        self._cache = (s, m, scale, sigma_bar, raw_pre >= CLIP, s >= std_floor)
        return {"std": np.maximum(s, std_floor), "raw": np.maximum(raw_pre, CLIP),
                "market": m[:, 0]}

    def loss_grad(self, out, batch):
        n, k = out["raw"].shape
        r_std = batch.r / batch.sigma_bar
        lr, dr = pinball_grad(self.taus, batch.r, out["raw"])
        ls, ds = pinball_grad(self.taus, r_std, out["std"])
        norm = 1.0 / (n * k)
        return float((lr.sum() + ls.sum()) * norm), {"raw": dr * norm, "std": ds * norm}

    def loss(self, out, batch):
        r_std = batch.r / batch.sigma_bar
        return aggregated_loss(batch.r, r_std, out["raw"], out["std"], self.taus)

    def backward(self, grads):
        s, m, scale, sigma_bar, live_raw, live_std = self._cache
        g_raw = np.where(live_raw, grads["raw"], 0.0)
        ds = np.where(live_std, grads["std"], 0.0) + g_raw * scale
        dm = (g_raw * s).sum(axis=1, keepdims=True) * sigma_bar
        self.stage1.backward(ds)
        self.market.backward(dm)


class BenchmarkNet:
    """Plain multi-output (or single-output MSE) feed-forward network on raw returns."""

    def __init__(self, kind, n_stock=STOCK_INPUTS, taus=None, width=128, dropout=0.2,
                 l1_first=1e-4, l1_second=1e-5, seed=0):
        layers = {"LNN": 0, "1hNN": 1, "2hNN": 2, "2hNN-MSE": 2}
        if kind not in layers:
            raise ValueError(f"unknown benchmark network {kind!r}")
        self.kind = kind
        self.taus = tau_grid(taus)
        self.mse = kind == "2hNN-MSE"
        n_out = 1 if self.mse else self.taus.size
        specs = []
        for i in range(layers[kind]):
            specs += hidden_block(width, dropout, l1=l1_first if i == 0 else l1_second)
        specs.append(LayerSpec("dense", n_out, l1=l1_first if layers[kind] == 0 else 0.0))
        self.store = ParamStore()
        self.net = Sequential(specs, n_stock, self.store, kind, seed)
        self.config = dict(kind=kind, n_stock=n_stock, width=width, dropout=dropout)

    def forward(self, x, z=None, sigma_bar=None, train=False, rng=None):
        y = self.net.forward(x, train, rng)
        if self.mse:
            self._live = None
            return {"mean": y[:, 0]}
        self._live = y >= CLIP
        return {"raw": np.maximum(y, CLIP)}

    def loss_grad(self, out, batch):
        if self.mse:
            err = out["mean"] - batch.r
            n = err.size
            return float(err @ err / n), {"mean": 2.0 * err / n}
        n, k = out["raw"].shape
        lr, dr = pinball_grad(self.taus, batch.r, out["raw"])
        return float(lr.sum() / (n * k)), {"raw": dr / (n * k)}

    def loss(self, out, batch):
        if self.mse:
            return float(np.mean((out["mean"] - batch.r) ** 2))
        return raw_head_loss(batch.r, out["raw"], self.taus)

    def backward(self, grads):
        if self.mse:
            self.net.backward(grads["mean"][:, None])
        else:
            self.net.backward(np.where(self._live, grads["raw"], 0.0))


def benchmark_nets(kind, **kw):
    return BenchmarkNet(kind, **kw)


# --------------------------------------------------------------------------
# training


class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly lower validation loss."""

    def __init__(self, patience=2):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, epoch, loss):
        """Record ``loss``; returns ``(improved, stop)``."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class FitHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0


def predict_batches(model, batch, size=65536):
    outs = []
    for s in range(0, len(batch), size):
        b = batch.take(slice(s, s + size))
        outs.append(model.forward(b.x, b.z, b.sigma_bar, train=False))
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}


def fit_model(model, data: Batch, config: TrainConfig, seed=0) -> FitHistory:
    """Train ``model`` in place with early stopping and best-state restore."""
    n = len(data)
    if n < 2:
        raise ValueError("need at least two training rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    tr, va = data.take(np.sort(perm[:-n_val])), data.take(np.sort(perm[-n_val:]))
    n_tr = len(tr)
    max_epochs = epochs_for(n_tr, config.epoch_constant)
    if config.max_epochs is not None:
        max_epochs = min(max_epochs, config.max_epochs)
    stopper = EarlyStopping(config.patience)
    hist = FitHistory()
    best = model.store.copy()
    lr = config.lr
    model.store.reset_optimizer()
    for epoch in range(max_epochs):
        order = rng.permutation(n_tr)
        total, count = 0.0, 0
        for s in range(0, n_tr, config.batch_size):
            idx = order[s:s + config.batch_size]
            if idx.size < 2:
                continue
            b = tr.take(idx)
            model.store.zero_grad()
            out = model.forward(b.x, b.z, b.sigma_bar, train=True, rng=rng)
            loss, grads = model.loss_grad(out, b)
            model.backward(grads)
            adam_step(model.store, lr, config.betas)
            total += loss * idx.size
            count += idx.size
        lr *= config.lr_decay
        val = model.loss(predict_batches(model, va), va)
        hist.train_loss.append(total / max(count, 1))
        hist.val_loss.append(val)
        improved, stop = stopper.update(epoch, val)
        if improved:
            best = model.store.copy()
        if stop:
            break
    hist.epochs_run = len(hist.val_loss)
    hist.best_epoch = stopper.best_epoch
    model.store.load_state(best)
    return hist


class Ensemble:
    """Members averaged on the raw-quantile scale and re-sorted per record."""

    def __init__(self, members, model_id="two-stage"):
        if not members:
            raise ValueError("empty ensemble")
        self.members = list(members)
        self.model_id = model_id

    def predict(self, batch: Batch):
        outs = [predict_batches(m, batch) for m in self.members]
        res = {}
        for key in outs[0]:
            avg = np.mean([o[key] for o in outs], axis=0)
            res[key] = np.sort(avg, axis=1) if avg.ndim == 2 else avg
        return res


def fit_ensemble(factory, data: Batch, config: TrainConfig, previous=None, seed_offset=0):
    """Train ``config.ensemble_size`` members; ``previous`` members seed fine-tuning."""
    members, hists = [], []
    for j in range(config.ensemble_size):
        seed = config.seed * 100_003 + 7 * j + seed_offset
        model = factory(j)
        if previous is not None and config.fine_tune:
            model.store.load_state(previous.members[j].store)
        hists.append(fit_model(model, data, config, seed=seed))
        members.append(model)
    return Ensemble(members), hists


@dataclass
class ForecastTable:
    """Forecast records: one row per (stock, date) with K quantiles per head."""

    stock_id: np.ndarray
    date: np.ndarray
    taus: np.ndarray
    q_raw: np.ndarray
    q_std: np.ndarray | None = None
    sigma_bar: np.ndarray | None = None
    market: np.ndarray | None = None
    model_id: str = "two-stage"

    def __len__(self):
        return self.stock_id.shape[0]

    def monotone(self):
        return bool(np.all(np.diff(self.q_raw, axis=1) >= 0))

    def select(self, mask):
        pick = lambda a: None if a is None else a[mask]
        return replace(self, stock_id=self.stock_id[mask], date=self.date[mask],
                       q_raw=self.q_raw[mask], q_std=pick(self.q_std),
                       sigma_bar=pick(self.sigma_bar), market=pick(self.market))

    @staticmethod
    def concat(tables):
        tables = [t for t in tables if len(t)]
        cat = lambda name: (None if getattr(tables[0], name) is None
                            else np.concatenate([getattr(t, name) for t in tables]))
        return ForecastTable(cat("stock_id"), cat("date"), tables[0].taus, cat("q_raw"),
                             cat("q_std"), cat("sigma_bar"), cat("market"),
                             tables[0].model_id)


def train(design, config: TrainConfig, windows, factory, model_id="two-stage"):
    """Annual expanding-window training with optional fine-tuning.

    ``design`` provides ``batch(mask)`` and ``keys(mask)``; each window is a pair
    ``(train_mask, forecast_mask)``. Returns the per-window ensembles and the
    concatenated forecasts.
    """
    ensembles, tables, histories = [], [], []
    prev = None
    for w, (train_mask, fc_mask) in enumerate(windows):
        if not np.any(train_mask):
            warnings.warn(f"window {w} has no training rows; skipped")
            continue
        data = design.batch(train_mask)
        ens, hists = fit_ensemble(factory, data, config,
                                  previous=prev if config.fine_tune else None,
                                  seed_offset=1000 * w)
        log.info("window %d: %d rows, epochs %s", w, len(data),
                 [h.epochs_run for h in hists])
        prev = ens
        ensembles.append(ens)
        histories.append(hists)
        if np.any(fc_mask):
            fb = design.batch(fc_mask)
            pred = ens.predict(fb)
            sid, dates = design.keys(fc_mask)
            tables.append(ForecastTable(sid, dates, ens.members[0].taus, pred["raw"],
                                        pred.get("std"), fb.sigma_bar, pred.get("market"),
                                        model_id))
    table = ForecastTable.concat(tables) if tables else None
    return ensembles, table, histories
