import numpy as np

from meaflow.problems import (
    LogisticLoss,
    ReluNetClassic,
    ReluNetSignedSquare,
    SigmoidNet,
    SparseDeconvolution,
)


def small_problems(seed=0):
    """One small instance per family (plus a logistic sigmoid variant)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3))
    y = rng.standard_normal(60)
    labels = np.where(rng.random(60) < 0.5, -1.0, 1.0)
    return {
        "deconvolution": SparseDeconvolution(rng.standard_normal(64), order=7, lam=0.7,
                                             reg_weight=0.3),
        "sigmoid": SigmoidNet(X, y, reg_weight=0.05),
        "sigmoid_logistic": SigmoidNet(X, labels, loss=LogisticLoss(), reg_weight=0.05),
        "relu_signed_square": ReluNetSignedSquare(X, y, reg_weight=0.02),
        "relu_classic": ReluNetClassic(X, y),
    }


ACCEPTANCE_LINES = []


def report_criterion(number, title, passed, detail=""):
    """Record one acceptance line; they are reprinted at the end of the session."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
    if detail:
        line += f" :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
