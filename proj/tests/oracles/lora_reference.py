#!/usr/bin/env python3
"""numpy reference for the frozen-plus-low-rank softmax toy.

Used to pick the separable fixture and confirm that plain gradient descent
(eta=0.1, 500 steps) drives the summed NLL below 10% of its starting value
for a spread of A initialisations, and to hand-check the d=2 logits.
"""
import numpy as np


def separable_fixture():
    d, V = 4, 3
    P = np.zeros((V, d))
    P[0, 0] = P[1, 1] = P[2, 2] = 1.0
    xs, ys = [], []
    for k in range(3):
        for j in range(4):
            x = np.zeros(d)
            x[k] = 1.0
            x[3] = 0.1 * (j - 1.5)
            xs.append(x)
            ys.append(k)
    return P, np.zeros((d, d)), xs, ys


def loss_and_grads(P, W, A, B, xs, ys):
    L = 0.0
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    for x, y in zip(xs, ys):
        z = P @ (W + A @ B) @ x
        p = np.exp(z - z.max())
        p /= p.sum()
        L -= np.log(max(p[y], 1e-300))
        dz = p.copy()
        dz[y] -= 1
        g = P.T @ dz
        gA += np.outer(g, B @ x)
        gB += np.outer(A.T @ g, x)
    return L, gA, gB


def train(A, B, P, W, xs, ys, eta, steps):
    first = None
    for _ in range(steps):
        L, gA, gB = loss_and_grads(P, W, A, B, xs, ys)
        first = L if first is None else first
        A = A - eta * gA
        B = B - eta * gB
    final, _, _ = loss_and_grads(P, W, A, B, xs, ys)
    return first, final


if __name__ == "__main__":
    P, W, xs, ys = separable_fixture()
    worst = 0.0
    for s in range(20):
        rng = np.random.default_rng(s)
        A = rng.uniform(-0.1, 0.1, size=(4, 2))
        B = np.zeros((2, 4))
        first, final = train(A, B, P, W, xs, ys, 0.1, 500)
        worst = max(worst, final / first)
    print("initial loss 12*ln3 =", 12 * np.log(3))
    print("worst final/initial ratio over 20 inits:", worst)

    # Hand fixture: d=2, r=1, V=2.
    P2 = np.array([[1.0, 2.0], [0.0, -1.0]])
    W2 = np.array([[0.5, 0.0], [0.0, 0.25]])
    A2 = np.array([[1.0], [2.0]])
    B2 = np.array([[0.5, -1.0]])
    x2 = np.array([2.0, 1.0])
    print("hand logits:", P2 @ (W2 + A2 @ B2) @ x2)
