# Builds the gold/prediction pair used by the metric tests.
# usage: python3 make_eval_fixture.py DATASET.jsonl GOLD_OUT PRED_OUT
import json, random, re, sys
src, gold_out, pred_out = sys.argv[1:4]
recs = [json.loads(l) for l in open(src)][:20]
with open(gold_out, "w") as f:
    for r in recs:
        f.write(json.dumps(r, separators=(",", ":"), ensure_ascii=False) + "\n")
rng = random.Random(20)
STR = re.compile(r'"((?:[^"\\]|\\.)*)"')
def edit(cmds):
    cmds = list(cmds)
    op = rng.choice(["typo", "case", "article", "swap_str", "intent", "drop", "float", "extra_say"])
    idx = [i for i, c in enumerate(cmds) if STR.search(c)]
    if op in ("typo", "case", "article", "swap_str") and idx:
        i = rng.choice(idx)
        m = STR.search(cmds[i]); s = m.group(1)
        if op == "typo" and len(s) >= 8:
            k = rng.randrange(1, len(s) - 1); s = s[:k] + ("z" if s[k] != "z" else "y") + s[k+1:]
        elif op == "case":
            s = s.upper()
        elif op == "article":
            s = "the " + s
        else:
            s = "something else entirely"
        cmds[i] = cmds[i][:m.start()] + '"' + s + '"' + cmds[i][m.end():]
    elif op == "intent":
        for i, c in enumerate(cmds):
            if re.match(r"x\d+ = \w+\(", c):
                cmds[i] = re.sub(r"= (\w+)\(", r"= \1_v2(", c, count=1); break
    elif op == "drop" and any(c != "say()" for c in cmds):
        cmds.pop(max(i for i, c in enumerate(cmds) if c != "say()"))
    elif op == "float":
        for i, c in enumerate(cmds):
            n = re.sub(r"=(\s*)(\d+)([,)]|$)", r"=\g<1>\2.0\3", c, count=1)
            if n != c: cmds[i] = n; break
    elif op == "extra_say":
        cmds.append("say()")
    return cmds
with open(pred_out, "w") as f:
    for r in recs:
        points = [t["commands"] for t in r["turns"] if t["kind"] == "system"]
        clean = rng.random() < 0.3
        for i, cmds in enumerate(points):
            if not clean and rng.random() < 0.5:
                cmds = edit(cmds)
            f.write(json.dumps({"conversation_id": r["id"], "point_index": i, "commands": cmds}, ensure_ascii=False) + "\n")
