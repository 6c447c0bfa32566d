"""Desk-scale training run used by the acceptance suite; prints one JSON line.

Usage: python learning_run.py {feas,ipm} EPOCHS
Run with OMP/OPENBLAS/MKL_NUM_THREADS=1 for the single-threaded timing.
"""

import json
import sys
import time

from lcqp_gnn import mpnn
from lcqp_gnn.datasets import GenConfig, generate_batch
from lcqp_gnn.pipelines import (SearchConfig, TrainConfig, attach_solution, evaluate_feasibility,
                                evaluate_ipm_guided, prepare_feasibility, train_feasibility,
                                train_ipm_guided)


def main(mode: str, epochs: int) -> dict:
    t0 = time.perf_counter()
    train = generate_batch(GenConfig("generic", n=20, m=10, seed=1000), 100, workers=1)
    test = generate_batch(GenConfig("generic", n=20, m=10, seed=5000), 20, workers=1)
    for inst in train + test:
        attach_solution(inst, T=8)
    model = mpnn.init_model(mode, L=4, d=32, seed=0)
    losses = []

    def progress(epoch, tlog):
        losses.append(tlog.epoch_loss[-1])

    if mode == "feas":
        cfg = SearchConfig()
        tlog = train_feasibility(model, [prepare_feasibility(i) for i in train], cfg,
                                 TrainConfig(epochs=epochs), callback=progress)
        res = evaluate_feasibility(model, [prepare_feasibility(i) for i in test], cfg, T=32)
        res["max_feas_violation"] = tlog.max_feas_violation
    else:
        cfg = SearchConfig(delta=1e-2)
        train_ipm_guided(model, train, cfg, TrainConfig(epochs=epochs), callback=progress)
        res = evaluate_ipm_guided(model, test, cfg, T=32)
    res.pop("per_instance")
    res["loss_first"], res["loss_last"] = losses[0], losses[-1]
    res["wall_time"] = time.perf_counter() - t0
    return res


if __name__ == "__main__":
    print(json.dumps(main(sys.argv[1], int(sys.argv[2]))))
