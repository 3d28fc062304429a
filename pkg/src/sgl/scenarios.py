"""Bundled scenarios: sources plus world generators, shared by the
benchmark command, the acceptance suite, and the demo scripts."""

from __future__ import annotations

import numpy as np

FIG2_COUNT_SOURCE = """
class Unit {
state:
  number x = 0;
  number y = 0;
  number range = 2.0;
  int cnt = 0;
effects:
  int cntE : sum;
update:
  cnt = cntE;
}

run countNeighbors(this: Unit) {
  accum int c with sum over Unit w from Unit {
    if (w.id != id && w.x >= x - range && w.x <= x + range
        && w.y >= y - range && w.y <= y + range) {
      c <- 1;
    }
  } in {
    cntE <- c;
  }
}
"""


def fig2_world(n: int, seed: int = 0, extent: float = 0.0, range_lo: float = 0.5,
               range_hi: float = 2.0, clustered: bool = False) -> dict:
    """Random unit placements; extent defaults to sqrt(n) * 3 so the average
    neighborhood stays small under the uniform profile."""
    rng = np.random.default_rng(seed)
    if extent <= 0:
        extent = max(8.0, float(np.sqrt(n) * 3.0))
    if clustered:
        extent = max(4.0, extent / 16.0)
    objs = []
    for i in range(n):
        objs.append({
            "class": "Unit",
            "id": i + 1,
            "fields": {
                "x": float(rng.uniform(0, extent)),
                "y": float(rng.uniform(0, extent)),
                "range": float(rng.uniform(range_lo, range_hi)),
            },
        })
    return {"objects": objs}


# Exploration -> battle: units wander until the rally tick, then converge on
# a rally point; the counting loop's fan-out explodes when they cluster.
EXPLORE_BATTLE_SOURCE = """
class Unit {
state:
  number x = 0;
  number y = 0;
  number drift = 1.0;
  number range = 3.0;
  int seen = 0;
effects:
  number dx : avg;
  number dy : avg;
  int seenE : sum;
update:
  x = x + dx;
  y = y + dy;
  seen = seenE;
}

run patrol(this: Unit) {
  if (tick >= 12) {
    dx <- (90.0 - x) / 4.0;
    dy <- (90.0 - y) / 4.0;
  } else {
    dx <- drift;
    dy <- 0.0 - drift;
  }
  accum int c with sum over Unit w from Unit {
    if (w.id != id && w.x >= x - range && w.x <= x + range
        && w.y >= y - range && w.y <= y + range) {
      c <- 1;
    }
  } in {
    seenE <- c;
  }
}
"""


def explore_battle_world(n: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    extent = max(60.0, float(np.sqrt(n) * 12.0))
    objs = []
    for i in range(n):
        objs.append({
            "class": "Unit",
            "id": i + 1,
            "fields": {
                "x": float(rng.uniform(0, extent)),
                "y": float(rng.uniform(0, extent)),
                "drift": float(rng.uniform(-1.5, 1.5)),
            },
        })
    return {"objects": objs}


# Finite-resource exchange: many buyers, one item in stock. Constraints make
# overdrafts and duplicate sales impossible; admission picks who wins.
MARKET_SOURCE = """
class Seller {
state:
  number stock = 1;
  number price = 4.0;
effects:
  number sold : sum;
update:
  stock = stock - sold;
constraints:
  stock >= 0;
}

class Buyer {
state:
  number account = 10;
  number items = 0;
  bool wants = true;
  ref<Seller> market = null;
effects:
  number spent : sum;
  number got : sum;
update:
  account = account - spent;
  items = items + got;
constraints:
  account > 0;
}

run buy(this: Buyer) {
  if (wants && lastTxnStatus != 1) {
    atomic {
      market.sold <- 1;
      spent <- market.price;
      got <- 1;
    }
  }
}
"""


def market_world(buyers: int, seed: int = 0, price: float = 4.0, stock: float = 1.0) -> dict:
    rng = np.random.default_rng(seed)
    objs = [{"class": "Seller", "id": 1, "fields": {"stock": stock, "price": price}}]
    for i in range(buyers):
        objs.append({
            "class": "Buyer",
            "id": i + 2,
            "fields": {"account": float(rng.uniform(1.0, 20.0)), "market": 1},
        })
    return {"objects": objs}


# The three-step behavior sequence: move, pick up, attack; written with
# waitNextTick and, separately, as the explicit state machine it lowers to.
MULTITICK_SOURCE = """
class Item {
state:
  number weight = 1;
}

class Unit {
state:
  number x = 0;
  number y = 0;
  number health = 20;
  ref<Unit> foe = null;
  ref<Item> loot = null;
  set<ref<Item>> bag = null;
effects:
  number moveX : avg;
  number moveY : avg;
  number damage : sum;
  set<ref<Item>> itemsAcquired : setUnion;
update:
  x = x + moveX;
  y = y + moveY;
  health = health - damage;
  bag = itemsAcquired;
}

run behave(this: Unit) {
  moveX <- 1.0;
  moveY <- 0.5;
  waitNextTick;
  itemsAcquired <= loot;
  waitNextTick;
  foe.damage <- 1;
}
"""

MULTITICK_EXPLICIT_SOURCE = """
class Item {
state:
  number weight = 1;
}

class Unit {
state:
  number x = 0;
  number y = 0;
  number health = 20;
  ref<Unit> foe = null;
  ref<Item> loot = null;
  set<ref<Item>> bag = null;
  int step = 0;
effects:
  number moveX : avg;
  number moveY : avg;
  number damage : sum;
  set<ref<Item>> itemsAcquired : setUnion;
  int stepE : max;
update:
  x = x + moveX;
  y = y + moveY;
  health = health - damage;
  bag = itemsAcquired;
  step = stepE;
}

run behave(this: Unit) {
  if (step == 0) {
    moveX <- 1.0;
    moveY <- 0.5;
    stepE <- 1;
  } else if (step == 1) {
    itemsAcquired <= loot;
    stepE <- 2;
  } else {
    foe.damage <- 1;
    stepE <- 0;
  }
}
"""


def multitick_world(pairs: int = 2, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    objs = []
    next_id = 1
    unit_ids = []
    for _ in range(pairs):
        item_id = next_id
        objs.append({"class": "Item", "id": item_id,
                     "fields": {"weight": float(rng.uniform(0.5, 3.0))}})
        next_id += 1
        unit_ids.append((next_id, item_id))
        next_id += 1
    for i, (uid, item_id) in enumerate(unit_ids):
        foe = unit_ids[(i + 1) % len(unit_ids)][0]
        objs.append({"class": "Unit", "id": uid,
                     "fields": {"x": float(i), "y": 0.0, "foe": foe, "loot": item_id}})
    return {"objects": sorted(objs, key=lambda o: o["id"])}


SCENARIOS = {
    "fig2-count": (FIG2_COUNT_SOURCE, fig2_world),
    "explore-battle": (EXPLORE_BATTLE_SOURCE, explore_battle_world),
    "market": (MARKET_SOURCE, market_world),
    "multitick": (MULTITICK_SOURCE, multitick_world),
}
