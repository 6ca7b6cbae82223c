"""Regenerates household_embeddings.txt, the small word-vector table bundled
with the crate. Vectors are category prototypes plus per-token jitter, so
objects used together sit close together. Deterministic (fixed seed)."""

import numpy as np

DIM = 32
CATEGORIES = {
    "cutlery": ["fork", "knife", "spoon", "teaspoon", "chopsticks"],
    "tableware": ["plate", "bowl", "cup", "mug", "glass", "saucer", "napkin", "teapot", "jug"],
    "condiment": ["salt", "pepper", "sugar", "ketchup", "mustard", "vinegar", "oil"],
    "electronics": ["computer", "monitor", "keyboard", "mouse", "printer", "phone",
                    "tablet", "speaker", "headphones", "webcam"],
    "stationery": ["pen", "pencil", "notepad", "notebook", "book", "stapler", "scissors",
                   "ruler", "eraser", "folder", "paper", "envelope"],
    "furniture": ["lamp", "desk_lamp", "chair", "desk", "table", "shelf", "cabinet", "drawer"],
    "food": ["bread", "apple", "banana", "cheese"],
    "decor": ["plant", "clock", "vase", "candle", "box", "bottle"],
}
# Tokens built as blends of others: (token, [(source, weight), ...]).
BLENDS = [
    ("laptop", [("computer", 0.5), ("keyboard", 0.3), ("monitor", 0.2)]),
]


def main():
    rng = np.random.default_rng(20210801)
    protos = {c: rng.normal(size=DIM) for c in CATEGORIES}
    vecs = {}
    for cat, tokens in CATEGORIES.items():
        for t in tokens:
            vecs[t] = protos[cat] + 0.55 * rng.normal(size=DIM)
    for token, parts in BLENDS:
        vecs[token] = sum(w * vecs[s] for s, w in parts) + 0.05 * rng.normal(size=DIM)
    with open("household_embeddings.txt", "w") as f:
        f.write(f"{DIM}\n")
        for t in sorted(vecs):
            f.write(t + " " + " ".join(f"{v:.6f}" for v in vecs[t]) + "\n")


if __name__ == "__main__":
    main()
