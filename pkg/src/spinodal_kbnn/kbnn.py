"""Knowledge-based networks: a frozen embedded network (ENN) for the base energy
plus a trainable master network (MNN) for the response to small perturbations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.metrics import r2_score

from . import dataio, nn
from .dataio import SchemaError
from .features import FEATURE_NAMES
from .nn import autodiff as ad
from .nn.layers import Concat, Conv2D, Dense, Flatten, MaxPool2D
from .nn.network import Network, Scaling, fit_normalization
from .nn.optim import TrainConfig, fit_regressor, train

MNN_INPUT_L2 = 0.001
STRESS_SCALE_FLOOR = 0.1
SHIFT_SOURCES = ("enn", "dns")
MNN_IMAGE_SOURCES = (None, "perturbed", "original")

# reported totals for the tabulated stacks; our convolution arithmetic gives different counts
REFERENCE_TOTALS = {"enn-cnn-single": 590, "mnn-cnn-enhanced": 10257}


class FrozenENNError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# presets


def _conv_block(filters, stride=1):
    return [Conv2D(filters, 3, stride, 2, "relu"), MaxPool2D(2, 1, 1)]


def enn_dnn(hidden=(76,), n_features=5, seed=0) -> Network:
    layers = [Dense(h, "softplus") for h in hidden] + [Dense(1)]
    return Network(layers, (n_features,), seed=seed, name="enn")


def enn_cnn_single(image_shape=(61, 61), seed=0) -> Network:
    layers = [l for f in (2, 3, 5, 6) for l in _conv_block(f)] + [Flatten(), Dense(1)]
    return Network(layers, (*image_shape, 1), seed=seed, name="enn")


def enn_cnn_multi(image_shape=(61, 61), seed=0) -> Network:
    layers = [l for f in (9, 15, 16) for l in _conv_block(f)] + [Flatten(), Dense(1)]
    return Network(layers, (*image_shape, 1), seed=seed, name="enn")


def mnn_plain(hidden=(26, 26), seed=0) -> Network:
    net = Network([Dense(h, "softplus") for h in hidden] + [Dense(1)], (3,), seed=seed, name="mnn")
    net.input_l2 = MNN_INPUT_L2
    return net


def mnn_cnn_enhanced(image_shape=(61, 61), seed=0) -> Network:
    layers = [l for f in (8, 16, 24) for l in _conv_block(f, stride=2)]
    layers += [Flatten(), Dense(8, "relu"), Concat("strain")]
    layers += [Dense(48, "softplus") for _ in range(3)] + [Dense(1)]
    net = Network(layers, (*image_shape, 1), aux_dim=3, seed=seed, name="mnn")
    net.input_l2 = MNN_INPUT_L2
    return net


PRESETS = {
    "enn-dnn": enn_dnn,
    "enn-cnn-single": enn_cnn_single,
    "enn-cnn-multi": enn_cnn_multi,
    "mnn-plain": mnn_plain,
    "mnn-cnn-enhanced": mnn_cnn_enhanced,
}


# ---------------------------------------------------------------------------
# data


@dataclass
class ImageStack:
    """Unique images (k, H, W) plus, for every row, the index of its image."""

    images: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.index = np.asarray(self.index, dtype=np.intp)
        if self.images.ndim != 3:
            raise ValueError("images must be (k, H, W)")
        if self.index.size and (self.index.min() < 0 or self.index.max() >= len(self.images)):
            raise ValueError("image index out of range")

    def subset(self, rows) -> "ImageStack":
        used, inv = np.unique(self.index[rows], return_inverse=True)
        return ImageStack(self.images[used], inv.ravel())

    def batch(self, rows=None):
        """(unique images as NHWC, per-row index) for the selected rows."""
        sub = self if rows is None else self.subset(rows)
        return sub.images[..., None], sub.index


@dataclass
class KBNNData:
    """Column-oriented mechanical-test data.

    ``E`` holds (E11, E12, E22) per row and ``F`` the 2x2 average deformation
    gradient. ``psi`` and ``P`` are labels; ``psi0`` is the DNS base energy of
    each row's microstructure.
    """

    E: np.ndarray
    F: np.ndarray | None = None
    psi: np.ndarray | None = None
    P: np.ndarray | None = None
    psi0: np.ndarray | None = None
    features: np.ndarray | None = None
    original: ImageStack | None = None
    perturbed: ImageStack | None = None

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=float).reshape(-1, 3)
        n = len(self.E)
        for name in ("F", "P"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float).reshape(n, 2, 2))
        for name in ("psi", "psi0"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float).reshape(n))
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float).reshape(n, -1)

    def __len__(self):
        return len(self.E)

    def subset(self, rows) -> "KBNNData":
        rows = np.asarray(rows, dtype=np.intp)
        pick = lambda v: None if v is None else v[rows]  # noqa: E731
        return KBNNData(
            E=self.E[rows],
            F=pick(self.F),
            psi=pick(self.psi),
            P=pick(self.P),
            psi0=pick(self.psi0),
            features=pick(self.features),
            original=None if self.original is None else self.original.subset(rows),
            perturbed=None if self.perturbed is None else self.perturbed.subset(rows),
        )

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise SchemaError(f"dataset lacks required columns: {', '.join(missing)}")


def boundary_mask(image) -> np.ndarray:
    """Zero every pixel except the one-pixel ring on the image border."""
    img = np.asarray(image, dtype=float)
    if img.ndim < 2:
        raise ValueError("image must be at least 2D")
    out = np.zeros_like(img)
    out[..., [0, -1], :] = img[..., [0, -1], :]
    out[..., :, [0, -1]] = img[..., :, [0, -1]]
    return out


def load_image_stack(ds: dataio.Dataset, column: str = "e2_image") -> ImageStack | None:
    """Unique images referenced by a dataset column (None if the column is empty)."""
    paths = np.asarray(ds[column], dtype=object)
    filled = paths != ""
    if not filled.any():
        return None
    if not filled.all():
        raise SchemaError(f"column {column} is only partly filled")
    uniq, inv = np.unique(paths.astype(str), return_inverse=True)
    root = ds.root or Path(".")
    images = np.stack([dataio.load_image(root / p) for p in uniq])
    return ImageStack(images, inv.ravel())


def data_from_dataset(ds: dataio.Dataset, perturbed: bool = False) -> KBNNData:
    """KBNN inputs from a D_III or D_IV table."""
    ds.expect("D_III", "D_IV")
    return KBNNData(
        E=ds.matrix(dataio.STRAIN_COLUMNS),
        F=ds.matrix(dataio.DEFGRAD_COLUMNS),
        psi=ds["Psi_mech"],
        P=ds.matrix(dataio.STRESS_COLUMNS),
        psi0=ds["Psi_mech_0"],
        features=ds.matrix(FEATURE_NAMES),
        original=load_image_stack(ds, "e2_image"),
        perturbed=load_image_stack(ds, "e2_perturbed") if perturbed else None,
    )


def enn_arrays(ds: dataio.Dataset, enn_input: str = "features") -> tuple[np.ndarray, np.ndarray]:
    """(inputs, base energy) from a D_I or D_II table; images come back NHWC."""
    ds.expect("D_I", "D_II")
    y = np.asarray(ds["Psi_mech_0"], dtype=float)
    if enn_input == "features":
        return ds.matrix(FEATURE_NAMES), y
    stack = load_image_stack(ds, "e2_image")
    if stack is None:
        raise SchemaError("dataset has no e2 images")
    return stack.images[stack.index][..., None], y


# ---------------------------------------------------------------------------
# model


@dataclass
class KBNNModel:
    """Frozen ENN plus trainable MNN.

    ``enn_input`` is "features" or "image" (the original e2 field). The MNN always
    receives the strains; with ``mnn_image`` set it also sees an e2 image through
    its convolutional branch, optionally reduced to the boundary ring.
    """

    enn: Network
    mnn: Network
    enn_input: str = "features"
    mnn_image: str | None = None
    beta: float = 0.01
    boundary_only: bool = False
    shift_source: str = "enn"
    stress_scale: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self):
        if self.enn_input not in ("features", "image"):
            raise ValueError("enn_input must be 'features' or 'image'")
        if self.mnn_image not in MNN_IMAGE_SOURCES:
            raise ValueError(f"mnn_image must be one of {MNN_IMAGE_SOURCES}")
        if self.shift_source not in SHIFT_SOURCES:
            raise ValueError(f"shift_source must be one of {SHIFT_SOURCES}")
        if not (self.beta >= 0 and np.isfinite(self.beta)):
            raise ValueError("beta must be a non-negative finite number")
        if self.mnn_image is not None and self.mnn.aux_dim != 3:
            raise ValueError("an image-fed MNN needs a 3-wide auxiliary strain input")
        self.enn.freeze()

    @property
    def uses_aux_strain(self) -> bool:
        return self.mnn_image is not None

    def flags(self) -> dict:
        return {
            "enn_input": self.enn_input,
            "mnn_image": self.mnn_image,
            "beta": self.beta,
            "boundary_only": self.boundary_only,
            "shift_source": self.shift_source,
            "stress_scale": np.asarray(self.stress_scale).tolist(),
        }


def _mnn_images(model: KBNNModel, data: KBNNData, rows=None):
    stack = data.perturbed if model.mnn_image == "perturbed" else data.original
    if stack is None:
        raise SchemaError(f"MNN expects {model.mnn_image} e2 images")
    x, idx = stack.batch(rows)
    return (boundary_mask(x[..., 0])[..., None] if model.boundary_only else x), idx


def mnn_output(model: KBNNModel, data: KBNNData, strain, rows=None) -> ad.Tensor:
    """Scaled MNN output for the selected rows; ``strain`` may be a Tensor."""
    if not model.uses_aux_strain:
        return model.mnn.forward(strain)
    x, idx = _mnn_images(model, data, rows)
    return model.mnn.forward(x, strain, x_index=idx)


def base_energy(model: KBNNModel, data: KBNNData) -> np.ndarray:
    """ENN prediction of the base energy for every row."""
    if model.enn_input == "features":
        data.require("features")
        return model.enn.predict(data.features).ravel()
    if data.original is None:
        raise SchemaError("ENN expects original e2 images")
    x, idx = data.original.batch()
    return model.enn.predict(x).ravel()[idx]


def shifted_labels(model: KBNNModel, data: KBNNData, base=None) -> np.ndarray:
    """Y = psi - psi0 with psi0 taken from the ENN or from the DNS column."""
    data.require("psi")
    if model.shift_source == "dns":
        data.require("psi0")
        return data.psi - data.psi0
    base = base_energy(model, data) if base is None else base
    return data.psi - base


def predict_energy(model: KBNNModel, data: KBNNData) -> tuple[np.ndarray, np.ndarray]:
    """(dPsi, Psi) where Psi = dPsi + ENN base energy."""
    with ad.no_grad():
        z = mnn_output(model, data, data.E).data.ravel()
    dpsi = model.mnn.label_scaling.invert(z[:, None]).ravel()
    return dpsi, dpsi + base_energy(model, data)


def _stress_map(F: np.ndarray) -> np.ndarray:
    """(n, 3, 4) map from dPsi/d(E11, E12, E22) to P = F S, flattened row-major."""
    F = np.asarray(F, dtype=float).reshape(-1, 2, 2)
    n = len(F)
    M = np.zeros((n, 3, 4))
    f11, f12, f21, f22 = F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1]
    M[:, 0, 0], M[:, 0, 2] = f11, f21
    M[:, 1] = 0.5 * np.stack([f12, f11, f22, f21], axis=1)
    M[:, 2, 1], M[:, 2, 3] = f12, f22
    return M


def _stress_tensor(model: KBNNModel, data: KBNNData, rows=None, create_graph=False):
    """P_KBNN (n, 4) as a Tensor, plus the scaled MNN output."""
    sub = data if rows is None else data.subset(rows)
    Et = ad.Tensor(sub.E, requires_grad=True)
    z = mnn_output(model, data, Et, rows)
    g = ad.grad(z.sum(), Et, create_graph=create_graph) * float(np.ravel(model.mnn.label_scaling.std)[0])
    M = _stress_map(sub.F)
    P = (g.reshape(len(sub), 3, 1) * M).sum(axis=1)
    return P, z


def predict_stress(model: KBNNModel, data: KBNNData) -> np.ndarray:
    """P_KBNN = F_avg S with S the symmetric strain gradient of dPsi."""
    data.require("F")
    P, _ = _stress_tensor(model, data)
    return P.data.reshape(-1, 2, 2)


def penalized_mse(model: KBNNModel, data: KBNNData, beta: float | None = None, labels=None) -> float:
    """mean[(Y - Z)^2 + beta * ||P_KBNN - P_DNS||_F^2] in physical units."""
    beta = model.beta if beta is None else beta
    Y = shifted_labels(model, data) if labels is None else np.asarray(labels, dtype=float)
    Z, _ = predict_energy(model, data)
    loss = (Y - Z) ** 2
    if beta:
        data.require("F", "P")
        diff = predict_stress(model, data) - data.P
        loss = loss + beta * np.sum(diff**2, axis=(1, 2))
    return float(np.mean(loss))


def training_loss_fn(model: KBNNModel, data: KBNNData, labels: np.ndarray, beta: float | None = None):
    """Closure over row subsets: the penalized loss in scaled units.

    Energy residuals are measured in label-std units and each stress component
    in units of its training std, so beta weighs comparable quantities.
    """
    beta = model.beta if beta is None else beta
    mnn = model.mnn
    y = mnn.label_scaling.apply(np.asarray(labels, dtype=float)[:, None])
    if beta:
        data.require("F", "P")
        P_ref = data.P.reshape(-1, 4) / model.stress_scale
    inv_scale = 1.0 / np.asarray(model.stress_scale)

    def fn(rows=None):
        rows = np.arange(len(data)) if rows is None else rows
        if beta:
            P, z = _stress_tensor(model, data, rows, create_graph=True)
            stress = ad.square(P * inv_scale - P_ref[rows]).sum(axis=1).mean()
            loss = ad.square(z - y[rows]).mean() + stress * beta
        else:
            z = mnn_output(model, data, data.E[rows], rows)
            loss = ad.square(z - y[rows]).mean()
        return loss + mnn.regularization()

    return fn


# ---------------------------------------------------------------------------
# training


def _image_scaling(images: np.ndarray) -> Scaling:
    return fit_normalization(images, per_feature=False, center=False)


def train_enn(network: Network, x, y, config: TrainConfig, x_val=None, y_val=None) -> dict:
    """Fit normalization on the training split and train the base-energy network."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(x), 1)
    if x.ndim == 2:
        network.input_scaling = fit_normalization(x)
    else:
        network.input_scaling = _image_scaling(x)
    network.label_scaling = fit_normalization(y)
    network.trainable = [True] * len(network.layers)
    return fit_regressor(network, x, y, config, x_val=x_val, y_val=y_val)


def prepare_mnn(model: KBNNModel, data: KBNNData, labels: np.ndarray):
    """Normalization and stress scales from the training split."""
    mnn = model.mnn
    strain = fit_normalization(data.E)
    if model.uses_aux_strain:
        mnn.aux_scaling = strain
        x, _ = _mnn_images(model, data)
        mnn.input_scaling = _image_scaling(x)
    else:
        mnn.input_scaling = strain
    mnn.label_scaling = fit_normalization(np.asarray(labels, dtype=float)[:, None])
    if data.P is not None:
        # a nearly constant component must not swamp the others
        std = data.P.reshape(-1, 4).std(axis=0)
        floor = STRESS_SCALE_FLOOR * std.max()
        model.stress_scale = np.maximum(std, floor) if floor > 0 else np.ones(4)


def train_kbnn(
    model: KBNNModel,
    data: KBNNData,
    config: TrainConfig,
    val_data: KBNNData | None = None,
    callback=None,
) -> dict:
    """Train the MNN on shifted labels; the ENN must come out bitwise unchanged."""
    before = model.enn.param_hash()
    model.enn.freeze()
    labels = shifted_labels(model, data)
    prepare_mnn(model, data, labels)
    fn = training_loss_fn(model, data, labels)
    val = None
    if val_data is not None and len(val_data):
        vfn = training_loss_fn(model, val_data, shifted_labels(model, val_data))
        val = lambda: vfn()  # noqa: E731
    history = train(model.mnn, fn, len(data), config, val_fn=val, callback=callback)
    if model.enn.param_hash() != before:
        raise FrozenENNError("embedded network parameters changed during training")
    history["enn_hash"] = before
    return history


def evaluate(model: KBNNModel, data: KBNNData) -> dict:
    """Coefficient of determination for dPsi, Psi and the four stress components."""
    out = {}
    dpsi, psi = predict_energy(model, data)
    if data.psi is not None:
        out["dPsi"] = r2_score(shifted_labels(model, data), dpsi)
        out["Psi"] = r2_score(data.psi, psi)
    if data.P is not None and data.F is not None:
        P = predict_stress(model, data)
        for k, name in enumerate(("P11", "P12", "P21", "P22")):
            out[name] = r2_score(data.P.reshape(-1, 4)[:, k], P.reshape(-1, 4)[:, k])
    return out


def with_beta(model: KBNNModel, beta: float) -> KBNNModel:
    return replace(model, beta=beta)


def save_model(model: KBNNModel, directory) -> Path:
    directory = Path(directory)
    nn.save_network(model.enn, directory, "enn")
    nn.save_network(model.mnn, directory, "mnn")
    path = directory / "kbnn.json"
    path.write_text(
        json.dumps({"format": "spinodal-kbnn-model/1", "enn": "enn.json", "mnn": "mnn.json", **model.flags()}, indent=2)
    )
    return path


def load_model(path) -> KBNNModel:
    path = Path(path)
    meta = json.loads(path.read_text())
    if meta.get("format") != "spinodal-kbnn-model/1":
        raise ValueError(f"{path}: not a KBNN checkpoint")
    return KBNNModel(
        enn=nn.load_network(path.parent / meta["enn"]),
        mnn=nn.load_network(path.parent / meta["mnn"]),
        enn_input=meta["enn_input"],
        mnn_image=meta["mnn_image"],
        beta=meta["beta"],
        boundary_only=meta["boundary_only"],
        shift_source=meta["shift_source"],
        stress_scale=np.asarray(meta["stress_scale"], dtype=float),
    )
