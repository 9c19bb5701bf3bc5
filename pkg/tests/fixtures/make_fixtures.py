"""Regenerate frozen oracle values.

Built from the closed-form model with plain loops and fixed-policy
iteration; nothing here imports the package.
"""
import json
import math
from pathlib import Path

from scipy.special import erfcinv

HERE = Path(__file__).parent


def two_state_model(snr_db=20.0, doppler=10.0, frame=1e-3, w=4.0, pb=0.01, L=10, p=0.5, floor_q=0.01):
    g = 10 ** (snr_db / 10)
    G2 = g * math.log(2.0)
    rate = math.sqrt(2 * math.pi * G2 / g) * doppler * math.exp(-G2 / g)
    up = rate * frame / 0.5
    Pc = [[1 - up, up], [up, 1 - up]]
    snr = [-g * math.log(1 - floor_q), G2]
    k = erfcinv(2 * pb) ** 2
    states = [(b, h) for b in range(L + 1) for h in range(2)]

    def cost(b, h, a):
        over = sum(pf * max(max(b - a, 0) + f - L, 0) for f, pf in ((0, 1 - p), (1, p)))
        return w * over + (k / snr[h] if a else 0.0)

    def succ(b, h, a):
        out = []
        for f, pf in ((0, 1 - p), (1, p)):
            nb = min(max(b - a, 0) + f, L)
            for h2 in range(2):
                out.append((nb * 2 + h2, pf * Pc[h][h2]))
        return out

    return states, cost, succ


def objective(theta, beta=0.95, tol=1e-13):
    states, cost, succ = two_state_model()
    acts = [1 if b >= theta[h] else 0 for b, h in states]
    c = [cost(b, h, a) for (b, h), a in zip(states, acts)]
    nxt = [succ(b, h, a) for (b, h), a in zip(states, acts)]
    V = [0.0] * len(states)
    while True:
        Vn = [c[i] + beta * sum(pr * V[j] for j, pr in nxt[i]) for i in range(len(states))]
        d = max(abs(x - y) for x, y in zip(Vn, V))
        V = Vn
        if d < tol:
            return sum(V)


if __name__ == "__main__":
    table = [[objective((i, j)) for j in range(11)] for i in range(11)]
    (HERE / "k2_table.json").write_text(json.dumps({"snr_db": 20.0, "table": table}, indent=1) + "\n")
    print("wrote k2_table.json")
