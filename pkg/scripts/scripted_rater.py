"""Drive a live rating service end-to-end as a scripted rater.

Usage: python scripts/scripted_rater.py --base-url http://127.0.0.1:8420 \
       [--policy random|left|right] [--seed N]
"""

import argparse
import json
import urllib.request

import numpy as np


def call(base, path, body=None):
    req = urllib.request.Request(
        base + path,
        data=json.dumps(body).encode() if body is not None else None,
        headers={"Content-Type": "application/json"},
        method="POST" if body is not None else "GET",
    )
    with urllib.request.urlopen(req) as resp:
        return json.loads(resp.read())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--base-url", default="http://127.0.0.1:8420")
    ap.add_argument("--policy", default="random", choices=["random", "left", "right"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    info = call(args.base_url, "/api/session")
    token = info["rater_token"]
    for i in range(info["n_trials"]):
        call(args.base_url, f"/api/trial/{i}")
        if args.policy == "left":
            side = "A"
        elif args.policy == "right":
            side = "B"
        else:
            side = "A" if rng.random() < 0.5 else "B"
        call(args.base_url, "/api/choice", {"trial": i, "side": side, "rater": token})
    print(f"rater {token} answered {info['n_trials']} trials")


if __name__ == "__main__":
    main()
