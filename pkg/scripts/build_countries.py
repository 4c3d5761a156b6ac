"""Generate the Countries S1/S2/S3 link-prediction tasks.

Source: country, region, subregion and land-border records from the
``world-countries`` npm package (ODbL, see ``source/world_countries_LICENSE``),
trimmed to the fields used here.

Protocol:
  * facts: locatedIn(country, subregion), locatedIn(country, region),
    locatedIn(subregion, region), neighborOf(country, country)
  * 24 test and 24 dev countries are drawn at random among countries that
    border at least one training country
  * S1 removes locatedIn(c, region) for every dev/test country c
  * S2 also removes locatedIn(c, subregion) for those countries
  * S3 also removes locatedIn(n, region) for every neighbor n of a dev/test country
  * queries are locatedIn(c, ?) for dev/test countries; candidates are the regions

Usage: python scripts/build_countries.py [--out data] [--seed 1]
"""
import argparse
import json
import random
import re
from pathlib import Path

HERE = Path(__file__).resolve().parent


def slug(name):
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def load_source():
    records = json.loads((HERE / "source" / "world_countries.json").read_text(encoding="utf-8"))
    records = [r for r in records if r["region"] and r["subregion"] and r["region"] != "Antarctic"]
    code = {r["cca3"]: slug(r["name"]) for r in records}
    countries = {}
    for r in records:
        countries[code[r["cca3"]]] = {
            "region": slug(r["region"]),
            "subregion": slug(r["subregion"]),
            "borders": sorted(code[b] for b in r["borders"] if b in code),
        }
    return countries


def build(countries, seed, n_test=24, n_dev=24):
    rng = random.Random(seed)
    names = sorted(countries)
    with_borders = [c for c in names if countries[c]["borders"]]
    while True:
        picked = rng.sample(with_borders, n_test + n_dev)
        test, dev = sorted(picked[:n_test]), sorted(picked[n_test:])
        held = set(test) | set(dev)
        train_c = [c for c in names if c not in held]
        if all(any(b not in held for b in countries[c]["borders"]) for c in held):
            break
    facts = set()
    for c, info in countries.items():
        facts.add((c, "locatedIn", info["subregion"]))
        facts.add((c, "locatedIn", info["region"]))
        facts.add((info["subregion"], "locatedIn", info["region"]))
        for b in info["borders"]:
            facts.add((c, "neighborOf", b))
    regions = sorted({info["region"] for info in countries.values()})
    tasks = {}
    for level in (1, 2, 3):
        removed = {(c, "locatedIn", countries[c]["region"]) for c in held}
        if level >= 2:
            removed |= {(c, "locatedIn", countries[c]["subregion"]) for c in held}
        if level >= 3:
            for c in held:
                for n in countries[c]["borders"]:
                    removed.add((n, "locatedIn", countries[n]["region"]))
        train = sorted(facts - removed)
        tasks[f"countries_s{level}"] = {
            "train": train,
            "dev": [(c, "locatedIn", countries[c]["region"]) for c in dev],
            "test": [(c, "locatedIn", countries[c]["region"]) for c in test],
            "candidates": regions,
            "n_train_countries": len(train_c),
        }
    return tasks


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(HERE.parent / "data"))
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    tasks = build(load_source(), args.seed)
    for name, task in tasks.items():
        d = Path(args.out) / name
        d.mkdir(parents=True, exist_ok=True)
        for split in ("train", "dev", "test"):
            with open(d / f"{split}.txt", "w", encoding="utf-8") as fh:
                fh.writelines(f"{s}\t{r}\t{o}\n" for s, r, o in task[split])
        (d / "candidates.txt").write_text("".join(f"{c}\n" for c in task["candidates"]), encoding="utf-8")
        print(f"{name}: {len(task['train'])} train facts, {len(task['dev'])} dev, {len(task['test'])} test queries")


if __name__ == "__main__":
    main()
