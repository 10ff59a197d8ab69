"""Writes corpus/conditions/oracle.jsonl: structured conditions over at most
three atoms, each evaluated by Python itself."""

import itertools
import json
import pathlib
import random

VARS = ["a", "b", "order.status"]
DOMAIN = [None, "gold", 7]
LITERALS = {None: "None", "gold": "'gold'", 7: "7"}


def atom(rng):
    var = rng.choice(VARS)
    op = rng.choice(["==", "!="])
    lit = rng.choice(DOMAIN)
    return var, f"{var} {op} {LITERALS[lit]}"


def python_eval(text, env):
    scope = {"a": env["a"], "b": env["b"], "order": type("O", (), {"status": env["order.status"]})}
    return bool(eval(text, {}, scope))


def main():
    rng = random.Random(20240611)
    out = pathlib.Path(__file__).resolve().parent.parent / "corpus" / "conditions" / "oracle.jsonl"
    lines = []
    seen = set()
    while len(lines) < 600:
        n = rng.randint(1, 3)
        atoms = [atom(rng)[1] for _ in range(n)]
        text = atoms[0]
        for a in atoms[1:]:
            text += rng.choice([" and ", " or "]) + a
        env = {v: rng.choice(DOMAIN) for v in VARS}
        key = (text, json.dumps(env, sort_keys=True))
        if key in seen:
            continue
        seen.add(key)
        lines.append(json.dumps({"condition": text, "env": env, "expected": python_eval(text, env)}))
    # every assignment of the three variables for one fixed three-atom condition
    text = "a == 'gold' and b != None or order.status == 7"
    for values in itertools.product(DOMAIN, repeat=3):
        env = dict(zip(VARS, values))
        lines.append(json.dumps({"condition": text, "env": env, "expected": python_eval(text, env)}))
    out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
