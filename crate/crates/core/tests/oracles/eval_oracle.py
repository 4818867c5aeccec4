# Independent metric computation.
# usage: python3 eval_oracle.py GOLD.jsonl PREDICTIONS.jsonl
import json, re, sys
from collections import defaultdict

def lex(s):
    toks, i = [], 0
    while i < len(s):
        c = s[i]
        if c.isspace(): i += 1; continue
        if c == '"':
            j, buf = i + 1, ""
            while s[j] != '"':
                if s[j] == "\\": buf += s[j+1]; j += 2
                else: buf += s[j]; j += 1
            toks.append(("str", buf)); i = j + 1; continue
        m = re.match(r"-?\d+\.\d+|-?\d+", s[i:])
        if m:
            t = m.group(0); toks.append(("float", float(t)) if "." in t else ("int", int(t))); i += len(t); continue
        m = re.match(r"[A-Za-z_][A-Za-z_0-9]*", s[i:])
        if m: toks.append(("id", m.group(0))); i += len(m.group(0)); continue
        toks.append(("p", c)); i += 1
    return toks

def var(name):
    assert re.fullmatch(r"x\d+", name), name
    return int(name[1:])

class P:
    def __init__(s, t): s.t, s.i = t, 0
    def peek(s, k=0): return s.t[s.i + k] if s.i + k < len(s.t) else (None, None)
    def take(s): s.i += 1; return s.t[s.i - 1]
    def value(s):
        k, v = s.take()
        if k in ("str", "int", "float"): return (k, v)
        if k == "p" and v == "[":
            items = []
            while s.peek() != ("p", "]"):
                items.append(s.value())
                if s.peek() == ("p", ","): s.take()
            s.take(); return ("list", tuple(items))
        if k == "id" and v in ("True", "False", "true", "false"): return ("bool", v.lower() == "true")
        if k == "id":
            if s.peek() == ("p", "."): s.take(); return ("attr", var(v), s.take()[1])
            return ("ref", var(v))
        raise ValueError(v)
    def kwargs(s):
        s.take(); out = []
        while s.peek() != ("p", ")"):
            k = s.take()[1]; s.take(); out.append((k, s.value()))
            if s.peek() == ("p", ","): s.take()
        s.take(); return tuple(out)

def parse(c):
    p = P(lex(c)); k, name = p.take()
    if name == "say": return ("say", p.kwargs())
    if name == "confirm": p.take(); v = var(p.take()[1]); return ("confirm", v)
    if p.peek() == ("p", "="): p.take(); intent = p.take()[1]; return ("call", var(name), intent, p.kwargs())
    p.take(); slot = p.take()[1]; p.take(); return ("assign", var(name), slot, p.value())

def norm(s):
    w = s.lower().split()
    if len(w) > 1 and w[0] in ("the", "a", "an"): w = w[1:]
    return " ".join(w).rstrip(".,!?;:").strip()

def lev(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j-1] + 1, prev[j-1] + (ca != cb)))
        prev = cur
    return prev[-1]

def fuzzy(a, b):
    a, b = norm(a), norm(b)
    if a == b: return True
    n = max(len(a), len(b))
    return n > 0 and 1 - lev(a, b) / n >= 0.85

def vmatch(g, p):
    if g[0] == "str" and p[0] == "str": return fuzzy(g[1], p[1])
    if g[0] == "list" and p[0] == "list": return len(g[1]) == len(p[1]) and all(vmatch(x, y) for x, y in zip(g[1], p[1]))
    return g == p

def slot_values(c):
    if c[0] == "call": return [((c[1], k), v) for k, v in c[3]]
    if c[0] == "assign": return [((c[1], c[2]), c[3])]
    return []

def fold(state, c):
    def res(v):
        if v[0] == "attr" and v[1] in state and v[2] in state[v[1]][1]: return state[v[1]][1][v[2]]
        return v
    if c[0] == "call": state[c[1]] = (c[2], {k: res(v) for k, v in c[3]})
    elif c[0] == "assign": state.setdefault(c[1], ("", {}))[1][c[2]] = res(c[3])

def maps_match(g, p):
    return len(g) == len(p) and all(k in p and vmatch(v, p[k]) for k, v in g.items())

def canon(known, cmds):
    m = {k: k for k in known}; nxt = max(known) + 1 if known else 0
    def val(v):
        if v[0] == "ref": return ("ref", m[v[1]])
        if v[0] == "attr": return ("attr", m[v[1]], v[2])
        if v[0] == "list": return ("list", tuple(val(x) for x in v[1]))
        return v
    out = []
    for c in cmds:
        if c[0] == "call":
            args = tuple(sorted(((k, val(v)) for k, v in c[3]), key=lambda a: a[0]))
            m[c[1]] = nxt; out.append(("call", nxt, c[2], args)); nxt += 1
        elif c[0] == "assign": out.append(("assign", m[c[1]], c[2], val(c[3])))
        elif c[0] == "say": out.append(("say", tuple(sorted(((k, val(v)) for k, v in c[1]), key=lambda a: a[0]))))
        else: out.append(("confirm", m[c[1]]))
    return out

def equal(known, g, p):
    try:
        a, b = canon(known, g), canon(known, p)
    except KeyError:
        return False
    return len(g) == len(p) and a == b

gold = [json.loads(l) for l in open(sys.argv[1])]
preds = defaultdict(dict)
for l in open(sys.argv[2]):
    d = json.loads(l); preds[d["conversation_id"]][d["point_index"]] = [parse(c) for c in d["commands"]]

T = defaultdict(lambda: [0, 0]); PH = defaultdict(lambda: [0, 0])
def bump(key, hit, table=T): table[key][0] += hit; table[key][1] += 1
for r in gold:
    gs, ps, known, allm, p = {}, {}, set(), True, 0
    seg = None
    def close():
        if seg and seg[2]: bump("em_turn", seg[1]); bump(seg[0], seg[1], PH)
    for t in r["turns"]:
        if t["kind"] == "user":
            close(); ph = t.get("phenomenon") or "none"; seg = [ph, True, False]
        elif t["kind"] == "system":
            g = [parse(c) for c in t["commands"]]; pr = preds[r["id"]][p]; p += 1
            for c in g:
                if c[0] == "call": bump("intent", any(x[0] == "call" and x[2] == c[2] for x in pr))
            for c in g: fold(gs, c)
            for c in pr: fold(ps, c)
            gsv, psv = dict(x for c in g for x in slot_values(c)), dict(x for c in pr for x in slot_values(c))
            if gsv or psv:
                bump("jga", len(gs) == len(ps) and all(k in ps and gs[k][0] == ps[k][0] and maps_match(gs[k][1], ps[k][1]) for k in gs))
                bump("slot", maps_match(gsv, psv))
            e = equal(known, g, pr); allm &= e
            if seg: seg[1] &= e; seg[2] = True
            known |= {c[1] for c in g if c[0] == "call"}
    close(); bump("em_conv", allm)
pct = lambda k, t=T: 100 * t[k][0] / t[k][1] if t[k][1] else 100.0
print(json.dumps({"intent_accuracy": pct("intent"), "joint_goal_accuracy": pct("jga"), "slot_accuracy": pct("slot"),
    "exact_match_turn": pct("em_turn"), "exact_match_conversation": pct("em_conv"),
    "counts": {k: T[k][1] for k in T}, "per_phenomenon": {k: [v[1], v[0]] for k, v in sorted(PH.items())}}, indent=1))
