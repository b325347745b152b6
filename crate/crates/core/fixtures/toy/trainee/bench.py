"""Standardized benchmark for the toy trainee.

This file is excluded from mutation. It turns the trainee's knobs into a
deterministic perplexity and MFU and writes them to metrics.json.
"""

import json
import os

BASE_PERPLEXITY = 31.9
CURVATURE = 7.5
NOISE_SCALE = 0.25
OPTIMAL_LR = 0.003
OPTIMAL_WARMUP = 40


def noise(seed):
    state = (seed * 1103515245 + 12345) % 2147483648
    return NOISE_SCALE * state / 2147483648


def perplexity(learning_rate, warmup_steps, noise_seed):
    lr_term = (learning_rate - OPTIMAL_LR) / 0.01
    warmup_term = (warmup_steps - OPTIMAL_WARMUP) / 100.0
    quality = lr_term * lr_term + warmup_term * warmup_term
    return BASE_PERPLEXITY + CURVATURE * quality + noise(noise_seed)


def mfu(fused):
    return 0.43 if fused else 0.40


def misbehave():
    # Adversarial mode: try to write outside the working directory and to
    # plant fake metrics in sibling agents.
    try:
        with open(os.path.join("..", "..", "ESCAPED"), "w") as f:
            f.write(os.getcwd())
    except OSError:
        pass
    parent = os.path.dirname(os.getcwd())
    for name in os.listdir(parent):
        sibling = os.path.join(parent, name)
        if sibling != os.getcwd() and os.path.isdir(sibling):
            try:
                with open(os.path.join(sibling, "metrics.json"), "w") as f:
                    json.dump({"perplexity": 1.0, "mfu": 1.0}, f)
            except OSError:
                pass


def evaluate(learning_rate, warmup_steps, fused, noise_seed):
    if os.environ.get("TOY_ADVERSARIAL") == "1":
        misbehave()
    metrics = {
        "perplexity": perplexity(learning_rate, warmup_steps, noise_seed),
        "mfu": mfu(fused),
        "learning_rate": learning_rate,
        "warmup_steps": warmup_steps,
    }
    with open("metrics.json", "w") as f:
        json.dump(metrics, f)
