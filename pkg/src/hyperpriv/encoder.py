"""Contrastive refinement of MRI view embeddings.

Feature-space augmentation (Gaussian noise then coordinate dropout) stands in
for volumetric augmentation: two augmentations of the same view are positives,
every other view's positive is an in-batch negative, and an InfoNCE objective
over cosine similarities trains a two-layer projection head.  The refined
embedding handed back to the cohort is the head's first-layer output, which
keeps the view dimension unchanged by default.
"""

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .cohort import Cohort
from .optim import Adam
from .seeding import child_seed, rng
from .validation import NumericalDivergenceError, check_finite


def augment(view: np.ndarray, seed: int, sigma_aug: float = 0.1, p_drop: float = 0.1) -> np.ndarray:
    """Gaussian perturbation followed by random coordinate dropout.

    Deterministic per seed; noise is drawn before the dropout mask, so
    ``p_drop=1`` yields an exact zero vector and ``sigma_aug=p_drop=0`` the
    identity.
    """
    view = check_finite("view", np.asarray(view, dtype=np.float64))
    g = rng(seed, "augment")
    noise = g.standard_normal(view.shape)
    keep = g.random(view.shape) >= p_drop
    return keep * (view + sigma_aug * noise)


def _unit_rows(z: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.norm(z, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError(f"{name} contains a zero-norm embedding; cosine similarity undefined")
    return z / norms


def info_nce_loss(z, z_pos, tau: float = 0.5) -> torch.Tensor:
    """Mean InfoNCE over anchors with in-batch negatives.

    For anchor i the candidate set is all N positives (its own plus the other
    anchors'); the anchor itself is never a candidate.  Similarity is cosine,
    scaled by 1/tau.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = torch.as_tensor(np.asarray(z, dtype=np.float64)) if not isinstance(z, torch.Tensor) else z.double()
    z_pos = (
        torch.as_tensor(np.asarray(z_pos, dtype=np.float64))
        if not isinstance(z_pos, torch.Tensor)
        else z_pos.double()
    )
    if z.shape != z_pos.shape or z.ndim != 2:
        raise ValueError("z and z_pos must be matching (N, d) batches")
    if z.shape[0] < 2:
        raise ValueError("info_nce_loss needs a batch of at least 2")
    sims = (_unit_rows(z, "z") @ _unit_rows(z_pos, "z_pos").T) / tau
    return (torch.logsumexp(sims, dim=1) - sims.diagonal()).mean()


class ContrastiveRefiner(BaseEstimator, TransformerMixin):
    """Projection head trained with InfoNCE over augmented view pairs.

    Parameters mirror the pretraining knobs; ``d_h=None`` keeps the refined
    dimension equal to the input dimension.  After ``fit`` the refined
    embedding of a view is the first-layer output ``tanh(x W1 + b1)``.
    """

    def __init__(
        self,
        d_h: int | None = None,
        d_z: int = 32,
        epochs: int = 200,
        lr: float = 5e-3,
        tau: float = 0.5,
        sigma_aug: float = 0.1,
        p_drop: float = 0.1,
        seed: int = 0,
    ):
        self.d_h = d_h
        self.d_z = d_z
        self.epochs = epochs
        self.lr = lr
        self.tau = tau
        self.sigma_aug = sigma_aug
        self.p_drop = p_drop
        self.seed = seed

    def _flat(self, views) -> np.ndarray:
        x = check_finite("views", np.asarray(views, dtype=np.float64))
        return x.reshape(-1, x.shape[-1])

    def fit(self, views, y=None):
        """Train the head on all views pooled into one batch.

        The augmentation pair per view is drawn once, giving a deterministic
        full-batch objective whose late-epoch loss decreases monotonically.
        """
        x = self._flat(views)
        n, d = x.shape
        if n < 2:
            raise ValueError("need at least 2 views to contrast")
        self.n_features_in_ = d
        d_h = d if self.d_h is None else int(self.d_h)

        aug_a = np.empty_like(x)
        aug_b = np.empty_like(x)
        for i in range(n):
            aug_a[i] = augment(x[i], child_seed(self.seed, "aug", i, 0), self.sigma_aug, self.p_drop)
            aug_b[i] = augment(x[i], child_seed(self.seed, "aug", i, 1), self.sigma_aug, self.p_drop)
        ta, tb = torch.from_numpy(aug_a), torch.from_numpy(aug_b)

        def init(name, *shape):
            g = rng(self.seed, "head_init", name)
            fan_in, fan_out = shape[0], (shape[1] if len(shape) > 1 else 1)
            std = np.sqrt(2.0 / (fan_in + fan_out))
            t = torch.from_numpy(g.normal(0.0, std, size=shape))
            t.requires_grad_(True)
            return t

        w1, b1 = init("w1", d, d_h), torch.zeros(d_h, dtype=torch.float64, requires_grad=True)
        w2, b2 = init("w2", d_h, self.d_z), torch.zeros(self.d_z, dtype=torch.float64, requires_grad=True)
        params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
        opt = Adam(params, lr=self.lr)

        def project(t):
            return torch.tanh(t @ w1 + b1) @ w2 + b2

        self.loss_history_ = []
        for epoch in range(self.epochs):
            for p in params.values():
                p.grad = None
            loss = info_nce_loss(project(ta), project(tb), self.tau)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NumericalDivergenceError(
                    f"contrastive pretraining diverged at epoch {epoch}: loss={value}"
                )
            loss.backward()
            opt.step()
            self.loss_history_.append(value)

        self.w1_, self.b1_ = w1.detach(), b1.detach()
        self.w2_, self.b2_ = w2.detach(), b2.detach()
        return self

    def transform(self, views) -> np.ndarray:
        """First-layer output on clean views; preserves leading shape."""
        x = np.asarray(views, dtype=np.float64)
        flat = self._flat(x)
        if flat.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {flat.shape[1]}")
        out = torch.tanh(torch.from_numpy(flat) @ self.w1_ + self.b1_).numpy()
        return out.reshape(*x.shape[:-1], out.shape[-1])


def pretrain_cohort(
    cohort: Cohort,
    epochs: int = 200,
    tau: float = 0.5,
    lr: float = 5e-3,
    seed: int = 0,
    sigma_aug: float = 0.1,
    p_drop: float = 0.1,
    d_h: int | None = None,
    d_z: int = 32,
):
    """Refine the cohort's MRI views in place of the raw ones.

    Returns (refined cohort, fitted refiner); with ``epochs=0`` the cohort is
    returned unchanged and the refiner unfitted.
    """
    refiner = ContrastiveRefiner(
        d_h=d_h, d_z=d_z, epochs=epochs, lr=lr, tau=tau, sigma_aug=sigma_aug, p_drop=p_drop, seed=seed
    )
    if epochs == 0:
        return cohort, refiner
    views = cohort.mri_array()
    refiner.fit(views)
    return cohort.with_mri(refiner.transform(views)), refiner
