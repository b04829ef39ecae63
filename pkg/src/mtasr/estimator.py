"""A scikit-learn style wrapper around the staged recipe."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import MixtureDataset, MixtureSample
from .evaluation import decode, score_all
from .scoring import corpus_wer
from .training import StagePlan, run_stage

RECIPES = {
    "sot": ("sot",),
    "serctc": ("sot", "serctc"),
    "stack": ("sot", "serctc", "stack"),
    "adaptation": ("sot", "serctc", "adaptation"),
    "refinement": ("sot", "serctc", "adaptation", "refinement"),
}


def check_dataset(X, like: MixtureDataset | None = None) -> MixtureDataset:
    """Accept a dataset or a non-empty sequence of samples."""
    if isinstance(X, MixtureDataset):
        if not len(X):
            raise ValueError("empty dataset")
        return X
    samples = list(X)
    if not samples or not all(isinstance(s, MixtureSample) for s in samples):
        raise TypeError("expected a MixtureDataset or a non-empty sequence of MixtureSample")
    if like is None:
        raise ValueError("a bare sample list needs a fitted estimator (for its vocabulary and spec)")
    return MixtureDataset(like.spec, like.vocab, samples)


class MultiTalkerASR(BaseEstimator):
    """Train the staged recipe up to ``system`` and transcribe mixtures.

    ``X`` is a :class:`MixtureDataset`; targets come from its references, so
    ``y`` is ignored.
    """

    def __init__(
        self,
        system: str = "adaptation",
        epochs: dict | None = None,
        batch_size: int = 16,
        seed: int = 0,
        model: dict | None = None,
        scoring_mode: str = "concatenated",
    ):
        self.system = system
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.model = model
        self.scoring_mode = scoring_mode

    def _plan(self, run: str) -> StagePlan:
        stage, extra = {
            "sot": ("sot_baseline", {"model": dict(self.model or {})}),
            "serctc": ("serctc", {}),
            "stack": ("stage1_adapter", {"adapter_mode": "stacked"}),
            "adaptation": ("stage1_adapter", {"adapter_mode": "gated"}),
            "refinement": ("stage2_refine", {}),
        }[run]
        epochs = (self.epochs or {}).get(run)
        return StagePlan(stage, epochs=epochs, batch_size=self.batch_size, seed=self.seed, **extra)

    def fit(self, X, y=None, dev=None):
        if self.system not in RECIPES:
            raise ValueError(f"system must be one of {tuple(RECIPES)}")
        train = check_dataset(X)
        dev = check_dataset(dev, train) if dev is not None else None
        ckpt = None
        self.history_ = {}
        for run in RECIPES[self.system]:
            result = run_stage(self._plan(run), train, dev, init=ckpt)
            ckpt = result.checkpoint
            self.history_[run] = result.metrics
        self.checkpoint_ = ckpt
        self.model_ = result.model
        self.train_data_ = train
        return self

    def predict(self, X) -> list[list[int]]:
        check_is_fitted(self, "model_")
        data = check_dataset(X, self.train_data_)
        return decode(self.model_, data.samples, "ctc" if self.system == "serctc" else "decoder")

    def wer(self, X) -> float:
        data = check_dataset(X, self.train_data_)
        hyps = self.predict(data)
        return corpus_wer(score_all(data.samples, hyps, self.model_.vocab, self.scoring_mode))

    def score(self, X, y=None) -> float:
        """Token accuracy ``1 - WER`` (higher is better)."""
        return 1.0 - self.wer(X) / 100.0
