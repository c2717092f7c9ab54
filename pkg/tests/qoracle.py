"""Reference tabular Q-learning written independently of sna.analytics (plain dicts and floats)."""

STATES = range(5)
ACTIONS = ("down", "stay", "up")
STEP = {"down": -1, "stay": 0, "up": +1}


def fresh():
    return {(s, a): 0.0 for s in STATES for a in ACTIONS}


def successor(s, a):
    return max(0, min(4, s + STEP[a]))


def update(table, s, a, r, s_next, alpha, gamma):
    target = r + gamma * max(table[(s_next, b)] for b in ACTIONS)
    table[(s, a)] = (1 - alpha) * table[(s, a)] + alpha * target
    return table


def greedy(table, s):
    # Prefer the longer interval on ties.
    order = ("up", "stay", "down")
    return max(order, key=lambda a: (table[(s, a)], -order.index(a)))
