"""Toy trainee: a learning-rate schedule with a handful of tunable knobs."""

import math

from bench import evaluate

LEARNING_RATE = 0.01
NOISE_SEED = 7


class TrainConfig:
    warmup_steps = 100
    total_steps = 200

    def __init__(self, steps=None):
        if steps is not None:
            self.total_steps = steps


def schedule(step, config):
    if step < config.warmup_steps:
        return LEARNING_RATE * (step + 1) / config.warmup_steps
    progress = (step - config.warmup_steps) / max(1, config.total_steps - config.warmup_steps)
    return LEARNING_RATE * 0.5 * (1.0 + math.cos(math.pi * progress))


def use_fused_kernels():
    return False


def train(config):
    area = 0.0
    for step in range(config.total_steps):
        area += schedule(step, config)
    return area


def main():
    config = TrainConfig()
    train(config)
    evaluate(
        learning_rate=LEARNING_RATE,
        warmup_steps=config.warmup_steps,
        fused=use_fused_kernels(),
        noise_seed=NOISE_SEED,
    )


if __name__ == "__main__":
    main()
