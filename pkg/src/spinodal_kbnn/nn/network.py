"""Sequential networks with an optional auxiliary input merged by a Concat layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..utils import array_hash, make_rng
from . import autodiff as ad
from .layers import Concat, layer_from_dict, layer_to_dict


class ShapeError(ValueError):
    pass


@dataclass
class Scaling:
    """Affine scaling (x - mean) / std; std is clamped to 1 where it vanishes."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))

    @classmethod
    def identity(cls):
        return cls(np.zeros(()), np.ones(()))


def fit_normalization(data, per_feature: bool = True, center: bool = True) -> Scaling:
    """z-score statistics from training data.

    ``per_feature`` gives one (mean, std) per column; otherwise a single scalar
    pair is used (images). With ``center=False`` the mean is fixed at 0, which
    keeps zero pixels zero.
    """
    x = np.asarray(data, dtype=float)
    if per_feature:
        mean = x.mean(axis=0) if center else np.zeros(x.shape[1:])
        std = x.std(axis=0) if center else np.sqrt(np.mean(x**2, axis=0))
    else:
        mean = np.asarray(x.mean() if center else 0.0)
        std = np.asarray(x.std() if center else np.sqrt(np.mean(x**2)))
    std = np.where(std > 1e-300, std, 1.0)
    return Scaling(np.asarray(mean, dtype=float), np.asarray(std, dtype=float))


class Network:
    """Ordered layers with a parameter store, trainable flags and scaling stats."""

    def __init__(self, layers, input_shape, aux_dim: int = 0, seed: int = 0, name: str = "net", init=True):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.aux_dim = int(aux_dim)
        self.name = name
        self.seed = int(seed)
        self.trainable = [True] * len(self.layers)
        self.input_scaling = Scaling.identity()
        self.aux_scaling = Scaling.identity()
        self.label_scaling = Scaling.identity()
        self.input_l2 = 0.0
        self.shapes = self._infer_shapes()
        self.params: dict[str, ad.Tensor] = {}
        if init:
            self._init_params()

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                if isinstance(layer, Concat):
                    if self.aux_dim < 1:
                        raise ShapeError("Concat needs aux_dim > 0")
                    shapes.append(layer.out_shape(shapes[-1], self.aux_dim))
                else:
                    shapes.append(layer.out_shape(shapes[-1]))
            except ValueError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
        return shapes

    def _init_params(self):
        rng = make_rng(self.seed)
        for i, layer in enumerate(self.layers):
            shapes = layer.param_shapes(self.shapes[i])
            if not shapes:
                continue
            fan_in, fan_out = layer.fan(self.shapes[i])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"{i}.kernel"] = ad.Tensor(
                rng.uniform(-limit, limit, size=shapes["kernel"]), requires_grad=True
            )
            self.params[f"{i}.bias"] = ad.Tensor(np.zeros(shapes["bias"]), requires_grad=True)

    # -- bookkeeping
    def layer_params(self, i) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.params.items() if k.split(".", 1)[0] == str(i)}

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if self.trainable[int(k.split(".", 1)[0])]]

    def freeze(self):
        self.trainable = [False] * len(self.layers)
        return self

    def count_variables(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def first_kernel_name(self) -> str | None:
        for i, layer in enumerate(self.layers):
            if f"{i}.kernel" in self.params:
                return f"{i}.kernel"
        return None

    def param_hash(self) -> str:
        return array_hash(*(self.params[k].data for k in sorted(self.params)))

    def get_weights(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def set_weights(self, weights: dict):
        for k, v in weights.items():
            if self.params[k].shape != np.shape(v):
                raise ShapeError(f"weight {k}: expected {self.params[k].shape}, got {np.shape(v)}")
            self.params[k] = ad.Tensor(np.array(v, dtype=float), requires_grad=True)

    # -- evaluation
    def forward(self, x, aux=None, x_index=None) -> ad.Tensor:
        """Graph-building pass from raw inputs to scaled output.

        Input scaling is part of the graph, so gradients with respect to raw
        inputs include the normalization chain rule. With ``x_index`` the main
        input holds unique samples only and row ``r`` of the batch uses sample
        ``x_index[r]``; the expansion happens just before the Concat layer.
        """
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind}): expected input {self.input_shape}, got {x.shape[1:]}")
        h = (x - self.input_scaling.mean) * (1.0 / self.input_scaling.std)
        a = None
        if aux is not None:
            aux = ad.as_tensor(aux)
            if aux.ndim != 2 or aux.shape[1] != self.aux_dim:
                raise ShapeError(f"auxiliary input must be (batch, {self.aux_dim}), got {aux.shape}")
            a = (aux - self.aux_scaling.mean) * (1.0 / self.aux_scaling.std)
        expanded = x_index is None
        for i, layer in enumerate(self.layers):
            if tuple(h.shape[1:]) != self.shapes[i]:
                raise ShapeError(f"layer {i} ({layer.kind}): expected input {self.shapes[i]}, got {h.shape[1:]}")
            p = self.layer_params(i)
            if isinstance(layer, Concat):
                if not expanded:
                    h, expanded = ad.take_rows(h, x_index), True
                if a is None or a.shape[0] != h.shape[0]:
                    raise ShapeError(f"layer {i} (concat): auxiliary batch does not match main batch {h.shape[0]}")
                h = layer.forward(h, p, a)
            else:
                h = layer.forward(h, p)
        return h if expanded else ad.take_rows(h, x_index)

    def predict(self, x, aux=None, x_index=None) -> np.ndarray:
        with ad.no_grad():
            z = self.forward(x, aux, x_index).data
        return self.label_scaling.invert(z)

    def activations(self, x, upto: int) -> np.ndarray:
        """Output of layer ``upto`` (0-based) for raw input x."""
        with ad.no_grad():
            h = (ad.as_tensor(x) - self.input_scaling.mean) * (1.0 / self.input_scaling.std)
            for i, layer in enumerate(self.layers[: upto + 1]):
                if isinstance(layer, Concat):
                    raise ValueError("activations are only available before the Concat layer")
                h = layer.forward(h, self.layer_params(i))
        return h.data

    def regularization(self) -> ad.Tensor:
        name = self.first_kernel_name()
        if not self.input_l2 or name is None:
            return ad.Tensor(0.0)
        return ad.square(self.params[name]).sum() * self.input_l2

    # -- serialization helpers
    def spec(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "aux_dim": self.aux_dim,
            "seed": self.seed,
            "layers": [layer_to_dict(l) for l in self.layers],
            "trainable": list(self.trainable),
            "input_scaling": self.input_scaling.to_dict(),
            "aux_scaling": self.aux_scaling.to_dict(),
            "label_scaling": self.label_scaling.to_dict(),
            "input_l2": self.input_l2,
        }

    @classmethod
    def from_spec(cls, spec: dict, weights: dict | None = None) -> "Network":
        net = cls(
            [layer_from_dict(d) for d in spec["layers"]],
            spec["input_shape"],
            spec.get("aux_dim", 0),
            spec.get("seed", 0),
            spec.get("name", "net"),
            init=weights is None,
        )
        net.trainable = list(spec.get("trainable", net.trainable))
        net.input_scaling = Scaling.from_dict(spec["input_scaling"])
        net.aux_scaling = Scaling.from_dict(spec["aux_scaling"])
        net.label_scaling = Scaling.from_dict(spec["label_scaling"])
        net.input_l2 = float(spec.get("input_l2", 0.0))
        if weights is not None:
            net.params = {k: ad.Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in weights.items()}
        return net


def count_variables(network: Network) -> int:
    return network.count_variables()


def forward(network: Network, x, aux=None) -> np.ndarray:
    return network.predict(x, aux)


def input_gradient(network: Network, x, aux=None, wrt: str = "main", create_graph: bool = False):
    """d(unscaled output summed over the batch)/d(raw input) for the selected input.

    Rows are independent, so this is the per-sample input gradient.
    """
    xt = ad.Tensor(np.asarray(x, dtype=float), requires_grad=(wrt == "main"))
    at = None if aux is None else ad.Tensor(np.asarray(aux, dtype=float), requires_grad=(wrt == "aux"))
    out = network.forward(xt, at) * network.label_scaling.std
    target = xt if wrt == "main" else at
    g = ad.grad(out.sum(), target, create_graph=create_graph)
    return g if create_graph else g.data


def parameter_gradients(network: Network, loss: ad.Tensor, create_graph: bool = False) -> dict:
    names = network.trainable_names()
    grads = ad.grad(loss, [network.params[n] for n in names], create_graph=create_graph)
    return dict(zip(names, grads))


def backward(network: Network, x, loss_grad, aux=None) -> dict:
    """Parameter gradients of <loss_grad, scaled output> (vector-Jacobian product)."""
    out = network.forward(x, aux)
    names = network.trainable_names()
    grads = ad.grad(out, [network.params[n] for n in names], grad_output=np.asarray(loss_grad, dtype=float))
    return {n: g.data for n, g in zip(names, grads)}
