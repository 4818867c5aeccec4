# Independent dataset statistics.
# usage: python3 stats_oracle.py DATASET.jsonl CATALOG.jsonl
import json, re, sys
from collections import Counter
recs = [json.loads(l) for l in open(sys.argv[1])]
cat = {j["intent_name"]: j for j in map(json.loads, open(sys.argv[2]))}
splits = Counter(r["split"] for r in recs)
turns = sum(len(r["turns"]) for r in recs)
ph = Counter(); unhappy = 0
used = set()
for r in recs:
    kinds = {t["phenomenon"] for t in r["turns"] if t["kind"] == "user" and t.get("phenomenon") not in (None, "none")}
    unhappy += bool(kinds)
    ph.update(kinds)
    for t in r["turns"]:
        if t["kind"] == "system":
            for c in t["commands"]:
                m = re.match(r'^x\d+ = ([a-z_0-9]+)\(', c)
                if m: used.add(m.group(1))
print("dialogues", len(recs)); print("turns", turns)
print("splits", dict(splits)); print("phenomena", dict(ph))
print("unhappy", unhappy, 100*unhappy/len(recs))
print("intents", len(used), "domains", len({cat[i]["domain"] for i in used}), "slots", sum(len(cat[i]["slots"]) for i in used))
