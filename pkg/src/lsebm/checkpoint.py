"""Versioned binary checkpoints.

Layout: a little-endian uint32 format version first, then a uint64
JSON-header length, the UTF-8 JSON header, and finally the raw
little-endian float64 payloads of every named tensor in header order.
The header carries model hyperparameters, the train config, optimizer
step counters and all RNG states, so a resumed run continues
bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .errors import CheckpointError
from .nets import AmortizedPosterior, Decoder, EBMPrior
from .sampler import PersistentChains
from .trainer import TrainConfig, TrainState

FORMAT_VERSION = 1


def _named_tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for group, net in (("prior", state.prior.net),
                       ("decoder", state.decoder.net),
                       ("posterior", state.posterior.net)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            out.append((f"{group}.w{i}", w.data))
            out.append((f"{group}.b{i}", b.data))
    out.append(("chains.states", state.chains.states))
    for name, opt in (("opt_prior", state.opt_prior),
                      ("opt_psi", state.opt_psi),
                      ("opt_sup", state.opt_sup)):
        for i, slot in enumerate(opt.slots):
            out.append((f"{name}.m{i}", slot.m))
            out.append((f"{name}.v{i}", slot.v))
    return out


def save_checkpoint(path, state: TrainState):
    tensors = _named_tensors(state)
    header = {
        "hyper": {
            "d": state.prior.d,
            "k": state.prior.k,
            "in_dim": state.posterior.in_dim,
            "out_dim": state.decoder.out_dim,
            "prior_hidden": state.prior.net.widths[1],
            "enc_hidden": state.posterior.net.widths[1],
            "dec_hidden": state.decoder.net.widths[1],
            "prior_activation": state.prior.net.activation,
            "enc_activation": state.posterior.net.activation,
            "dec_activation": state.decoder.net.activation,
            "decoder_variant": state.decoder.variant,
            "sigma2": state.decoder.sigma2,
        },
        "config": dataclasses.asdict(state.config),
        "iteration": state.iteration,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "opt_t": {
            "opt_prior": [s.t for s in state.opt_prior.slots],
            "opt_psi": [s.t for s in state.opt_psi.slots],
            "opt_sup": [s.t for s in state.opt_sup.slots],
        },
        "rng": state.rng.bit_generator.state,
        "chain_rngs": [r.bit_generator.state for r in state.chains.rngs],
        "chain_meta": {
            "count": state.chains.count,
            "seed": state.chains.seed,
            "step_size": state.chains.step_size,
            "steps_per_update": state.chains.steps_per_update,
        },
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointError("truncated checkpoint")
        (version,) = struct.unpack("<I", raw)
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} != {FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError("truncated tensor payload")
            arrays[entry["name"]] = np.frombuffer(
                buf, dtype="<f8").reshape(shape).astype(np.float64)

    hyper = header["hyper"]
    config = TrainConfig(**header["config"])
    prior = EBMPrior(hyper["d"], hyper["k"], hidden=hyper["prior_hidden"],
                     activation=hyper["prior_activation"])
    posterior = AmortizedPosterior(hyper["in_dim"], hyper["d"],
                                   hidden=hyper["enc_hidden"],
                                   activation=hyper["enc_activation"])
    decoder = Decoder(hyper["d"], hyper["out_dim"], hidden=hyper["dec_hidden"],
                      variant=hyper["decoder_variant"], sigma2=hyper["sigma2"],
                      activation=hyper["dec_activation"])
    state = TrainState.create(config, prior, posterior, decoder)
    state.iteration = int(header["iteration"])

    for group, net in (("prior", prior.net), ("decoder", decoder.net),
                       ("posterior", posterior.net)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            w.data = arrays[f"{group}.w{i}"].copy()
            b.data = arrays[f"{group}.b{i}"].copy()

    meta = header["chain_meta"]
    state.chains = PersistentChains(
        meta["count"], hyper["d"], seed=meta["seed"],
        step_size=meta["step_size"],
        steps_per_update=meta["steps_per_update"])
    state.chains.states = arrays["chains.states"].copy()
    for rng, st in zip(state.chains.rngs, header["chain_rngs"]):
        rng.bit_generator.state = st

    for name, opt in (("opt_prior", state.opt_prior),
                      ("opt_psi", state.opt_psi),
                      ("opt_sup", state.opt_sup)):
        for i, slot in enumerate(opt.slots):
            slot.m = arrays[f"{name}.m{i}"].copy()
            slot.v = arrays[f"{name}.v{i}"].copy()
            slot.t = int(header["opt_t"][name][i])

    state.rng.bit_generator.state = header["rng"]
    return state
