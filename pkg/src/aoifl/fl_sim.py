"""Desk-scale FedAvg with pluggable client selection.

Each round the selection policy picks participants, every participant runs
local mini-batch SGD from the current global model on its own shard, and the
server replaces the global model by the plain average of the returned
weights.  The average is taken over the participants actually present, which
under decentralised (Markov) selection need not be ``k``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_int, check_real
from .data import ClientShard, Dataset, PartitionSpec, partition
from .models import DivergenceError, log_softmax, make_model, sgd_epochs
from .policy_math import PolicyConfig
from .sched_sim import InitMode, initial_ages, make_policy, step_round

__all__ = [
    "TrainConfig",
    "FLRunHistory",
    "local_train",
    "aggregate",
    "evaluate",
    "run_federated",
    "FederatedClassifier",
    "DivergenceError",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 200
    local_epochs: int = 5
    batch_size: int = 50
    lr0: float = 0.1
    lr_decay: float = 0.998
    target_accuracy: float = 0.9
    seed: int = 0
    model: str = "logistic"
    hidden: int = 64
    init: InitMode = InitMode.ALL_ZERO

    def __post_init__(self):
        check_int(self.rounds, "rounds", min_value=1)
        check_int(self.local_epochs, "local_epochs", min_value=0)
        check_int(self.batch_size, "batch_size", min_value=1)
        check_real(self.lr0, "lr0", low=0, low_open=True)
        check_real(self.lr_decay, "lr_decay", low=0, high=1, low_open=True)
        check_real(self.target_accuracy, "target_accuracy", low=0, high=1,
                   low_open=True, high_open=True)
        check_int(self.seed, "seed", min_value=0)
        check_int(self.hidden, "hidden", min_value=1)
        if self.model not in ("logistic", "mlp"):
            raise ValueError(f"unknown model {self.model!r}")
        object.__setattr__(self, "init", InitMode(self.init))

    def learning_rate(self, round: int) -> float:
        return self.lr0 * self.lr_decay ** round


@dataclass
class FLRunHistory:
    policy: str
    seed: int
    accuracy: list = field(default_factory=list)
    loss: list = field(default_factory=list)       # training loss of the global model
    test_loss: list = field(default_factory=list)
    n_selected: list = field(default_factory=list)
    participation: np.ndarray | None = None
    target_accuracy: float | None = None
    rounds_to_target: int | None = None
    final_params: np.ndarray | None = None

    @property
    def rounds(self) -> int:
        return len(self.accuracy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "accuracy", "loss", "n_selected"])
        for t, (acc, loss, sel) in enumerate(zip(self.accuracy, self.loss, self.n_selected), 1):
            writer.writerow([t, repr(float(acc)), repr(float(loss)), int(sel)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "rounds": self.rounds,
            "target_accuracy": self.target_accuracy,
            "rounds_to_target": self.rounds_to_target,
            "final_accuracy": float(self.accuracy[-1]) if self.accuracy else None,
            "zero_participant_rounds": int(sum(1 for s in self.n_selected if s == 0)),
        }


def local_train(shard: ClientShard, dataset: Dataset, params: np.ndarray, cfg: TrainConfig,
                round: int, rng: np.random.Generator, model=None) -> np.ndarray:
    """``cfg.local_epochs`` epochs of SGD on one shard at the round's learning rate.

    ``params`` is not modified.  Raises :class:`DivergenceError` tagged with
    ``round`` if the loss or weights stop being finite.
    """
    if model is None:
        model = make_model(cfg.model, dataset.n_features, dataset.n_classes, cfg.hidden)
    if not np.all(np.isfinite(params)):
        raise DivergenceError(f"round {round}: non-finite input parameters", round)
    X = dataset.features[shard.indices]
    y = dataset.labels[shard.indices]
    try:
        return sgd_epochs(model, params, X, y, cfg.local_epochs, cfg.batch_size,
                          cfg.learning_rate(round), rng)
    except DivergenceError as exc:
        raise DivergenceError(f"round {round}: {exc}", round) from None


def aggregate(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean of the participants' weight vectors."""
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty list of updates")
    dims = {np.shape(u) for u in updates}
    if len(dims) != 1:
        raise ValueError(f"updates disagree in shape: {sorted(dims)}")
    return np.mean(np.stack(updates), axis=0)


def evaluate(params: np.ndarray, dataset: Dataset, model) -> dict:
    """Top-1 accuracy (ties go to the lowest class index) and mean cross-entropy."""
    if params.shape != (model.n_params,):
        raise ValueError(f"expected {model.n_params} parameters, got {params.shape}")
    if dataset.n_features != model.n_features:
        raise ValueError(
            f"dataset has {dataset.n_features} features, model expects {model.n_features}"
        )
    logits = model.logits(params, dataset.features)
    logp = log_softmax(logits)
    y = dataset.labels
    accuracy = float(np.mean(np.argmax(logits, axis=1) == y))
    loss = float(-logp[np.arange(y.shape[0]), y].mean())
    return {"accuracy": accuracy, "loss": loss}


def _client_rng(seed: int, round: int, client: int) -> np.random.Generator:
    # keyed by (round, client) so local shuffles do not depend on who else
    # was selected, which keeps policy comparisons paired
    return np.random.default_rng(np.random.SeedSequence([seed, 1, round, client]))


def run_federated(dataset: Dataset, test_set: Dataset, spec: PartitionSpec,
                  config: PolicyConfig, policy, cfg: TrainConfig,
                  shards: list[ClientShard] | None = None) -> FLRunHistory:
    """Run ``cfg.rounds`` rounds of FedAvg under ``policy``.

    Partition, model initialisation and local shuffling depend only on
    ``cfg.seed``, never on the policy, so two policies run with the same seed
    differ only in who is selected.
    """
    if isinstance(policy, str):
        policy = make_policy(policy, config)
    n = config.n
    seed = cfg.seed
    if shards is None:
        shards = partition(dataset, spec, n, seed=np.random.SeedSequence([seed, 0]))
    if len(shards) != n:
        raise ValueError(f"got {len(shards)} shards for n={n} clients")
    smallest = min(len(s) for s in shards)
    if cfg.batch_size > smallest:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds smallest shard ({smallest})")
    if test_set.n_features != dataset.n_features:
        raise ValueError("train and test feature dimensions differ")

    model = make_model(cfg.model, dataset.n_features, dataset.n_classes, cfg.hidden)
    params = model.init_params(np.random.default_rng(np.random.SeedSequence([seed, 2])))
    ages = initial_ages(config, policy, cfg.init,
                        np.random.default_rng(np.random.SeedSequence([seed, 3])))
    select_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 4])))

    history = FLRunHistory(policy=policy.name, seed=seed, target_accuracy=cfg.target_accuracy)
    participation = np.zeros(n, dtype=np.int64)
    for t in range(cfg.rounds):
        chosen = np.flatnonzero(step_round(ages, policy, select_rng))
        participation[chosen] += 1
        if chosen.size:
            updates = [
                local_train(shards[i], dataset, params, cfg, t, _client_rng(seed, t, i), model)
                for i in chosen
            ]
            with np.errstate(over="ignore", invalid="ignore"):
                params = aggregate(updates)
            if not np.all(np.isfinite(params)):
                raise DivergenceError(f"round {t}: non-finite global model", t)
        else:
            logger.info("round %d: no participants, global model unchanged", t)
        test = evaluate(params, test_set, model)
        history.accuracy.append(test["accuracy"])
        history.test_loss.append(test["loss"])
        history.loss.append(model.loss(params, dataset.features, dataset.labels))
        history.n_selected.append(int(chosen.size))
        if history.rounds_to_target is None and test["accuracy"] >= cfg.target_accuracy:
            history.rounds_to_target = t + 1
    history.participation = participation
    history.final_params = params
    return history


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains a global model by simulated FedAvg.

    Parameters mirror :class:`TrainConfig` plus the population ``(n_clients,
    k, m)``, the selection ``policy`` (``uniform``, ``bernoulli``, ``markov``
    or ``oldest``) and the data ``partition`` (``iid`` or ``dirichlet`` with
    ``alpha``).  After fitting, ``history_`` holds the per-round record; the
    curve is evaluated on ``(X_eval, y_eval)`` when given, else on the
    training data.
    """

    def __init__(self, n_clients=100, k=15, m=10, policy="markov", partition="iid",
                 alpha=0.6, rounds=200, local_epochs=5, batch_size=50, lr0=0.1,
                 lr_decay=0.998, model="logistic", hidden=64, target_accuracy=0.9,
                 init="all_zero", random_state=0):
        self.n_clients = n_clients
        self.k = k
        self.m = m
        self.policy = policy
        self.partition = partition
        self.alpha = alpha
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.model = model
        self.hidden = hidden
        self.target_accuracy = target_accuracy
        self.init = init
        self.random_state = random_state

    def fit(self, X, y, X_eval=None, y_eval=None):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = unique_labels(y)
        self.n_features_in_ = X.shape[1]
        train = Dataset(X, np.searchsorted(self.classes_, y), len(self.classes_))
        if X_eval is None:
            test = train
        else:
            X_eval, y_eval = check_X_y(X_eval, y_eval, dtype=float)
            unknown = np.setdiff1d(y_eval, self.classes_)
            if unknown.size:
                raise ValueError(f"evaluation labels not seen in training: {unknown}")
            test = Dataset(X_eval, np.searchsorted(self.classes_, y_eval), len(self.classes_))
        config = PolicyConfig(self.n_clients, self.k, self.m)
        cfg = TrainConfig(
            rounds=self.rounds, local_epochs=self.local_epochs, batch_size=self.batch_size,
            lr0=self.lr0, lr_decay=self.lr_decay, target_accuracy=self.target_accuracy,
            seed=self.random_state, model=self.model, hidden=self.hidden, init=self.init,
        )
        spec = PartitionSpec(self.partition, self.alpha)
        self.history_ = run_federated(train, test, spec, config, self.policy, cfg)
        self.model_ = make_model(self.model, X.shape[1], len(self.classes_), self.hidden)
        self.params_ = self.history_.final_params
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.logits(self.params_, X)

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
