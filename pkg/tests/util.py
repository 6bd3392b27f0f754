"""Shared builders: handcrafted traces, random MLPs, and a naive loop-based
forward pass that serves as the independent oracle for the numpy one."""

from __future__ import annotations

import math
import random

import numpy as np

from branchsim.predictor import MlpWeights
from branchsim.workload import BranchTemplate, RequestTrace, Workload


def make_template(length: int, final: str, probes=(), conv=None,
                  pred=None) -> BranchTemplate:
    return BranchTemplate(
        natural_length=length,
        final_answer=final,
        probes=[tuple(p) for p in probes],
        oracle_convergence=conv,
        pred_probs=[tuple(p) for p in pred] if pred is not None else None,
    )


def make_trace(rid: str, ground_truth: str, templates,
               prompt_tokens: int = 0, difficulty=None) -> RequestTrace:
    return RequestTrace(
        id=rid,
        ground_truth=ground_truth,
        prompt_tokens=prompt_tokens,
        templates=list(templates),
        difficulty=difficulty,
    )


def single_branch_workload(n: int, length: int, answer: str = "7",
                           prompt_tokens: int = 0) -> Workload:
    return Workload([
        make_trace(f"r{i:05d}", answer,
                   [make_template(length, answer, conv=length)],
                   prompt_tokens=prompt_tokens, difficulty=1)
        for i in range(n)
    ])


def random_mlp(rng: random.Random, input_dim: int, layer_dims, head_dim: int,
               activation: str = "relu", layernorm: bool = True,
               batchnorm: bool = False, scale: float = 0.5) -> MlpWeights:
    def matrix(rows, cols):
        return np.array([[rng.uniform(-scale, scale) for _ in range(cols)]
                         for _ in range(rows)])

    def vector(n, lo=-scale, hi=scale):
        return np.array([rng.uniform(lo, hi) for _ in range(n)])

    dims = [input_dim, *layer_dims, head_dim]
    return MlpWeights(
        input_dim=input_dim,
        layer_dims=list(layer_dims),
        head_dim=head_dim,
        activations=[activation] * len(layer_dims),
        weights=[matrix(dims[k + 1], dims[k]) for k in range(len(dims) - 1)],
        biases=[vector(dims[k + 1]) for k in range(len(dims) - 1)],
        ln_gain=vector(input_dim, 0.5, 1.5) if layernorm else None,
        ln_bias=vector(input_dim) if layernorm else None,
        bn_mean=[vector(d) for d in layer_dims] if batchnorm else None,
        bn_var=[vector(d, 0.5, 2.0) for d in layer_dims] if batchnorm else None,
        bn_gain=[vector(d, 0.5, 1.5) for d in layer_dims] if batchnorm else None,
        bn_bias=[vector(d) for d in layer_dims] if batchnorm else None,
    )


def naive_mlp_forward(weights: MlpWeights, activation):
    """Straight-line reimplementation of the forward pass with Python loops;
    kept independent of the numpy implementation it checks."""
    x = [float(v) for v in activation]
    n = len(x)
    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    x = [(v - mean) / math.sqrt(var + 1e-5) for v in x]
    if weights.ln_gain is not None:
        x = [v * g + b for v, g, b in zip(x, weights.ln_gain, weights.ln_bias)]

    def affine(matrix, bias, vec):
        out = []
        for i in range(len(bias)):
            acc = float(bias[i])
            row = matrix[i]
            for j in range(len(vec)):
                acc += float(row[j]) * vec[j]
            out.append(acc)
        return out

    for k in range(len(weights.layer_dims)):
        x = affine(weights.weights[k], weights.biases[k], x)
        if weights.bn_mean is not None:
            x = [(v - float(m)) / math.sqrt(float(s) + 1e-5) * float(g) + float(b)
                 for v, m, s, g, b in zip(x, weights.bn_mean[k], weights.bn_var[k],
                                          weights.bn_gain[k], weights.bn_bias[k])]
        if weights.activations[k] == "relu":
            x = [max(v, 0.0) for v in x]
        else:
            x = [v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x]
    logits = affine(weights.weights[-1], weights.biases[-1], x)
    if weights.head_dim == 1:
        probs = [1.0 / (1.0 + math.exp(-logits[0]))]
    else:
        top = max(logits)
        exps = [math.exp(v - top) for v in logits]
        total = sum(exps)
        probs = [e / total for e in exps]
    return logits, probs
