"""Deterministic patterns-of-life generator with injected anomalies.

Agents live on an hourly clock: home overnight, work 09:00-17:00 on
weekdays, meals whenever their hunger clock runs out, and evening (and
weekend afternoon) outings to recreation sites shared with their social
group. Consecutive hours at one POI collapse into a single staypoint.

Anomalies only touch hours after the split time:

* hunger: the hunger period is divided by 1.5 / 2 / 3 (yellow/orange/red);
* work: each test weekday is skipped with probability 0.2 / 0.5 / 1.0;
* social: each outing goes to a uniformly random recreation site with
  probability 0.2 / 0.5 / 1.0;
* imposter: two agents exchange their test-period records.

Every anomaly decision draws from its own per-agent stream (see
:func:`anomaly_rng`) so that, for a fixed seed, a stronger intensity
produces a superset of the weaker one's anomalous events.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

from .trajectory import (GeoPoint, SplitDataset, StaypointRecord, TrajectoryDataset,
                         dataset_from_records, split_train_test)

APARTMENT, WORKPLACE, RESTAURANT, RECREATIONAL = "Apartment", "Workplace", "Restaurant", "Recreational"
VENUE_TYPES = (APARTMENT, WORKPLACE, RESTAURANT, RECREATIONAL)
TYPE_SHARES = (0.4, 0.2, 0.2, 0.2)

HUNGER, WORK, SOCIAL, IMPOSTER = "hunger", "work", "social", "imposter"
KINDS = (HUNGER, WORK, SOCIAL, IMPOSTER)
YELLOW, ORANGE, RED = "yellow", "orange", "red"
INTENSITIES = (YELLOW, ORANGE, RED)
BEHAVIOR_PROBABILITY = {YELLOW: 0.2, ORANGE: 0.5, RED: 1.0}
HUNGER_DIVISOR = {YELLOW: 1.5, ORANGE: 2.0, RED: 3.0}
NORMAL = "normal"

DEFAULT_START = datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp()  # a Monday
BOX_DEG = 0.2
BOX_ORIGIN = (39.85, 116.30)

_STREAM = {"behavior": 0, WORK: 1, SOCIAL: 2, "jitter": 3, "errand": 4}

# schedule template; per-agent values are drawn around these
EVENING_LEN = 2
WEEKEND_OUT = range(13, 16)
RESTAURANT_POOL = 8
ERRAND_SITES = 3
GROUP_SIZE = 10
GROUP_VENUES = 4
# lifestyle archetypes and their population shares
LIFESTYLES = ("commuter", "hybrid", "shift", "outgoing")
LIFESTYLE_SHARES = (0.55, 0.15, 0.1, 0.2)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class Poi:
    poi_id: str
    location: GeoPoint
    venue_type: str


@dataclass(frozen=True)
class World:
    pois: tuple[Poi, ...]
    bbox: tuple[float, float, float, float]   # lat_min, lon_min, lat_max, lon_max
    seed: int

    def of_type(self, vtype: str) -> list[int]:
        return [i for i, p in enumerate(self.pois) if p.venue_type == vtype]


@dataclass(frozen=True)
class AgentProfile:
    user_id: str
    home: int
    work: int
    favorite_restaurants: tuple[int, ...]
    favorite_recreation: tuple[int, ...]
    hunger_period_h: float
    social_group: int
    group_venues: tuple[int, ...] = ()
    home_pool: tuple[int, ...] = ()
    work_pool: tuple[int, ...] = ()
    errand_sites: tuple[int, ...] = ()
    wake_hour: int = 7
    sleep_hour: int = 23
    work_start: int = 9
    work_end: int = 17
    workdays: tuple[int, ...] = (0, 1, 2, 3, 4)
    evening_start: int = 19
    outing_prob: float = 0.5
    group_venue_prob: float = 0.3
    eat_at_home_prob: float = 0.5
    explore_prob: float = 0.15
    venue_weights: tuple[float, ...] = ()   # cumulative preference over group_venues
    lifestyle: str = "commuter"
    weekend_outings: bool = True
    routine_sites: tuple[int, ...] = ()     # daytime haunts on free weekdays
    routine_prob: float = 0.0


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    intensity: str
    affected_users: tuple[str, ...]
    start: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SynthError(f"unknown anomaly kind {self.kind!r}")
        if self.intensity not in INTENSITIES:
            raise SynthError(f"unknown intensity {self.intensity!r}")
        object.__setattr__(self, "affected_users", tuple(self.affected_users))


@dataclass(frozen=True)
class Label:
    kind: str = NORMAL
    intensity: str = ""

    @property
    def anomalous(self) -> bool:
        return self.kind != NORMAL


@dataclass(frozen=True)
class LabeledDataset:
    split: SplitDataset
    labels: Mapping[str, Label]
    manifest: Mapping = field(default_factory=dict)

    def anomalous_users(self) -> set[str]:
        return {u for u, lab in self.labels.items() if lab.anomalous}


def apportion(n: int, shares: Sequence[float] = TYPE_SHARES) -> list[int]:
    """Largest-remainder split of n items by shares; ties favour earlier types."""
    quotas = [n * s for s in shares]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(shares)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def generate_world(n_pois: int, seed: int, origin: tuple[float, float] = BOX_ORIGIN) -> World:
    if n_pois < 4:
        raise SynthError("a world needs at least 4 POIs")
    rng = np.random.default_rng([seed, 7])
    types = [t for t, c in zip(VENUE_TYPES, apportion(n_pois)) for _ in range(c)]
    lat = origin[0] + rng.uniform(0.0, BOX_DEG, n_pois)
    lon = origin[1] + rng.uniform(0.0, BOX_DEG, n_pois)
    pois = tuple(Poi(f"poi{i:05d}", GeoPoint(float(a), float(o)), t)
                 for i, (a, o, t) in enumerate(zip(lat, lon, types)))
    return World(pois, (origin[0], origin[1], origin[0] + BOX_DEG, origin[1] + BOX_DEG), seed)


def anomaly_rng(seed: int, agent_index: int, stream: str) -> np.random.Generator:
    """Per-agent random stream. The work stream yields one uniform per
    scheduled test workday, the social stream one uniform and one site index
    per test outing."""
    return np.random.default_rng([seed, agent_index, _STREAM[stream]])


def _nearest(world: World, candidates: list[int], point: GeoPoint, k: int) -> tuple[int, ...]:
    lat = np.array([world.pois[i].location.lat for i in candidates])
    lon = np.array([world.pois[i].location.lon for i in candidates])
    d = (lat - point.lat) ** 2 + ((lon - point.lon) * np.cos(np.radians(point.lat))) ** 2
    return tuple(candidates[i] for i in np.argsort(d, kind="stable")[:k])


def _draw_schedule(rng, lifestyle: str) -> dict:
    """Working pattern and outing habits for one lifestyle archetype."""
    start = int(rng.integers(7, 11))
    sched = dict(work_start=start, work_end=min(start + int(rng.choice([8, 9])), 19),
                 workdays=(0, 1, 2, 3, 4), evening_start=int(rng.integers(18, 21)),
                 outing_prob=float(rng.uniform(0.15, 0.7)),
                 eat_at_home_prob=float(rng.uniform(0.3, 0.8)),
                 explore_prob=float(rng.uniform(0.0, 0.3)),
                 weekend_outings=True, routine_prob=0.0)
    if lifestyle == "commuter" and rng.random() < 0.2:
        k = int(rng.integers(3, 5))
        sched["workdays"] = tuple(sorted(int(d) for d in rng.choice(5, size=k, replace=False)))
    elif lifestyle == "hybrid":
        k = int(rng.integers(1, 3))
        sched["workdays"] = tuple(sorted(int(d) for d in rng.choice(5, size=k, replace=False)))
        sched["routine_prob"] = float(rng.uniform(0.4, 0.8))
    elif lifestyle == "shift":
        start = int(rng.integers(13, 16))
        off = int(rng.integers(7))
        sched.update(work_start=start, work_end=start + 8, evening_start=10,
                     workdays=tuple(d for d in range(7) if d not in (off, (off + 1) % 7)),
                     weekend_outings=False)
    elif lifestyle == "outgoing":
        sched.update(outing_prob=float(rng.uniform(0.8, 1.0)),
                     eat_at_home_prob=float(rng.uniform(0.0, 0.3)),
                     explore_prob=float(rng.uniform(0.3, 0.5)))
    return sched


def make_agents(world: World, n_agents: int, seed: int) -> list[AgentProfile]:
    """Draw homes, workplaces, social groups, lifestyles and routine parameters."""
    rng = np.random.default_rng([seed, 11])
    homes, works = world.of_type(APARTMENT), world.of_type(WORKPLACE)
    rests, recs = world.of_type(RESTAURANT), world.of_type(RECREATIONAL)
    n_groups = max(1, int(np.ceil(n_agents / GROUP_SIZE)))
    group_of = rng.permutation(np.arange(n_agents) % n_groups)
    group_venues = [tuple(int(v) for v in rng.choice(recs, size=min(GROUP_VENUES, len(recs)),
                                                     replace=False))
                    for _ in range(n_groups)]
    agents = []
    for i in range(n_agents):
        home = int(rng.choice(homes))
        work = int(rng.choice(works))
        home_loc, work_loc = world.pois[home].location, world.pois[work].location
        work_pool = _nearest(world, rests, work_loc, RESTAURANT_POOL)
        home_pool = _nearest(world, rests, home_loc, RESTAURANT_POOL)
        lifestyle = LIFESTYLES[int(rng.choice(len(LIFESTYLES), p=LIFESTYLE_SHARES))]
        n_fav = int(rng.integers(1, 5))
        favs = tuple(int(v) for v in rng.choice(work_pool, size=min(n_fav, len(work_pool)),
                                                replace=False))
        g = int(group_of[i])
        venues = group_venues[g]
        n_rec = int(rng.integers(4, 7)) if lifestyle == "outgoing" else int(rng.integers(1, 4))
        fav_rec = tuple(int(v) for v in rng.choice(venues, size=min(n_rec, len(venues)),
                                                   replace=False))
        weights = np.cumsum(rng.dirichlet(np.full(len(venues), 0.3)))
        errands = _nearest(world, recs, home_loc, ERRAND_SITES)
        routine = tuple(int(v) for v in rng.choice(errands, size=int(rng.integers(1, 3)),
                                                   replace=False))
        sched = _draw_schedule(rng, lifestyle)
        agents.append(AgentProfile(
            user_id=f"agent{i:04d}", home=home, work=work, favorite_restaurants=favs,
            favorite_recreation=fav_rec, hunger_period_h=float(rng.uniform(2.0, 8.0)),
            social_group=g, group_venues=venues, home_pool=home_pool, work_pool=work_pool,
            errand_sites=errands, wake_hour=int(rng.integers(6, 10)),
            sleep_hour=int(rng.integers(22, 25)),
            group_venue_prob=float(rng.uniform(0.1, 0.6)),
            venue_weights=tuple(float(w) for w in weights), lifestyle=lifestyle,
            routine_sites=routine, **sched,
        ))
    return agents


def _simulate_agent(world: World, agent: AgentProfile, index: int, n_days: int,
                    test_start_day: int, anomalies: Mapping[str, str], seed: int,
                    start: float) -> tuple[list[StaypointRecord], dict[str, int]]:
    """Hourly simulation of one agent; also returns test-period event counts
    (skipped workdays, random recreation picks, meals)."""
    rb = anomaly_rng(seed, index, "behavior")
    rw = anomaly_rng(seed, index, WORK)
    rs = anomaly_rng(seed, index, SOCIAL)
    re = anomaly_rng(seed, index, "errand")
    rj = anomaly_rng(seed, index, "jitter")
    recs_all = world.of_type(RECREATIONAL)
    leisure_all = sorted(recs_all + world.of_type(RESTAURANT))
    evening = range(agent.evening_start, agent.evening_start + EVENING_LEN)
    hunger = 0.0
    location = []   # poi index per hour
    events = {"skipped_work": 0, "random_recreation": 0, "meals": 0}
    for day in range(n_days):
        testing = day >= test_start_day
        dow = day % 7                 # the calendar starts on a Monday
        period = agent.hunger_period_h
        if testing and HUNGER in anomalies:
            period /= HUNGER_DIVISOR[anomalies[HUNGER]]
        scheduled = dow in agent.workdays
        working = scheduled
        if scheduled and testing and WORK in anomalies:
            if rw.random() < BEHAVIOR_PROBABILITY[anomalies[WORK]]:
                working = False
                events["skipped_work"] += 1
        plan = {}
        if scheduled and not working:
            # the skipped work block is spent at arbitrary leisure venues
            mid = (agent.work_start + agent.work_end) // 2
            site = leisure_all[re.integers(len(leisure_all))]
            for h in range(agent.work_start, mid):
                plan[h] = site
            if re.random() < 0.5:
                site = leisure_all[re.integers(len(leisure_all))]
                for h in range(mid + 1, agent.work_end):
                    plan[h] = site
        # free-weekday routine; drawn every day to keep the stream aligned
        r_go, r_site, r_slot = rb.random(), rb.random(), rb.random()
        if (not scheduled and dow < 5 and agent.routine_sites
                and r_go < agent.routine_prob):
            site = agent.routine_sites[int(r_site * len(agent.routine_sites))]
            begin = 10 if r_slot < 0.5 else 14
            for h in range(begin, begin + 2):
                plan[h] = site
        weekend = dow >= 5 and agent.weekend_outings
        for window in [evening] + ([WEEKEND_OUT] if weekend else []):
            go = rb.random() < agent.outing_prob
            use_group = rb.random() < agent.group_venue_prob
            fav = agent.favorite_recreation[rb.integers(len(agent.favorite_recreation))]
            pick = int(np.searchsorted(agent.venue_weights, rb.random() * agent.venue_weights[-1]))
            grp = agent.group_venues[min(pick, len(agent.group_venues) - 1)]
            if not go:
                continue
            dest = grp if use_group else fav
            if testing and SOCIAL in anomalies:
                # both draws every outing, so intensities share one sequence
                fires = rs.random() < BEHAVIOR_PROBABILITY[anomalies[SOCIAL]]
                site = recs_all[rs.integers(len(recs_all))]
                if fires:
                    dest = site
                    events["random_recreation"] += 1
            for h in window:
                plan[h] = dest
        for hour in range(24):
            if hour < agent.wake_hour or hour >= agent.sleep_hour:
                location.append(agent.home)
                continue
            if hour in plan:
                here = plan[hour]
            elif working and agent.work_start <= hour < agent.work_end:
                here = agent.work
            else:
                here = agent.home
            hunger += 1.0
            if hunger >= period:
                hunger = 0.0
                events["meals"] += testing
                at_home = rb.random() < agent.eat_at_home_prob
                wander = rb.random() < agent.explore_prob
                fav = agent.favorite_restaurants[rb.integers(len(agent.favorite_restaurants))]
                pool = agent.work_pool if here == agent.work else agent.home_pool
                near = pool[rb.integers(len(pool))]
                if not (here == agent.home and at_home):
                    here = near if wander else fav
            location.append(here)
    records = []
    h0 = 0
    boundary = test_start_day * 24   # no stay may straddle the split
    for h in range(1, len(location) + 1):
        if h == len(location) or h == boundary or location[h] != location[h0]:
            poi = world.pois[location[h0]]
            t_in = start + h0 * 3600.0 + float(rj.integers(60, 900))
            t_out = start + h * 3600.0 - float(rj.integers(60, 900))
            records.append(StaypointRecord(agent.user_id, poi.location, t_in, t_out,
                                           poi.venue_type, poi.poi_id))
            h0 = h
    return records, events


def simulate(world: World, n_agents: int, train_days: int, test_days: int,
             specs: Sequence[AnomalySpec] = (), seed: int = 0,
             start: float = DEFAULT_START) -> LabeledDataset:
    """Run every agent over train_days + test_days and split at the boundary."""
    if train_days < 1 or test_days < 1:
        raise SynthError("train_days and test_days must be >= 1")
    if n_agents < 1:
        raise SynthError("n_agents must be >= 1")
    agents = make_agents(world, n_agents, seed)
    ids = {a.user_id: i for i, a in enumerate(agents)}
    t_split = start + train_days * 86400.0
    per_agent: dict[str, dict[str, str]] = {a.user_id: {} for a in agents}
    labels = {a.user_id: Label() for a in agents}
    imposters = []
    for spec in specs:
        for u in spec.affected_users:
            if u not in ids:
                raise SynthError(f"anomaly spec references unknown user {u!r}")
        if spec.start is not None and spec.start != t_split:
            raise SynthError("anomalies must start at the split time")
        if spec.kind == IMPOSTER:
            users = list(spec.affected_users)
            if len(users) % 2:
                raise SynthError("imposter anomalies need an even number of users")
            imposters += list(zip(users[0::2], users[1::2]))
            continue
        for u in spec.affected_users:
            per_agent[u][spec.kind] = spec.intensity
            labels[u] = Label(spec.kind, spec.intensity)
    records, events = [], {}
    for a in agents:
        recs, ev = _simulate_agent(world, a, ids[a.user_id], train_days + test_days,
                                   train_days, per_agent[a.user_id], seed, start)
        records += recs
        if per_agent[a.user_id]:
            events[a.user_id] = ev
    catalog = {p.poi_id: (p.location, p.venue_type) for p in world.pois}
    ds = dataset_from_records(records, VENUE_TYPES, users=[a.user_id for a in agents],
                              poi_catalog=catalog)
    manifest = {"n_agents": n_agents, "train_days": train_days, "test_days": test_days,
                "n_pois": len(world.pois), "seed": seed, "world_seed": world.seed,
                "start": start, "t_split": t_split,
                "specs": [{**asdict(s), "affected_users": list(s.affected_users)} for s in specs],
                "anomaly_events": events}
    labeled = LabeledDataset(split_train_test(ds, t_split), labels, manifest)
    if imposters:
        labeled = imposter_swap(labeled, imposters, seed)
    return labeled


def imposter_swap(dataset: LabeledDataset, user_pairs: Iterable[tuple[str, str]],
                  seed: int = 0) -> LabeledDataset:
    """Exchange the test-period records of each pair; both become imposters.

    ``seed`` is accepted for interface symmetry; the swap is deterministic.
    """
    pairs = [tuple(p) for p in user_pairs]
    split = dataset.split
    flat = [u for p in pairs for u in p]
    if len(flat) != len(set(flat)):
        raise SynthError("imposter pairs must be disjoint")
    for u in flat:
        if u not in split.test.trajectories:
            raise SynthError(f"unknown user {u!r}")
    if not pairs:
        return dataset
    partner = {}
    for a, b in pairs:
        partner[a], partner[b] = b, a
    swapped = []
    for u in split.test.users:
        for r in split.test.trajectories[u].records:
            if u in partner:
                r = StaypointRecord(partner[u], r.location, r.checkin, r.leave,
                                    r.venue_type, r.poi_id)
            swapped.append(r)
    test = dataset_from_records(swapped, split.test.type_catalog, users=split.test.users,
                                poi_catalog=split.test.poi_catalog)
    labels = dict(dataset.labels)
    for u in flat:
        labels[u] = Label(IMPOSTER, RED)
    manifest = dict(dataset.manifest)
    manifest["imposter_pairs"] = manifest.get("imposter_pairs", []) + [list(p) for p in pairs]
    return LabeledDataset(SplitDataset(split.train, test, split.t_split, split.cold_start_users),
                          labels, manifest)


def merged_dataset(labeled: LabeledDataset) -> TrajectoryDataset:
    s = labeled.split
    return dataset_from_records(list(s.train.records()) + list(s.test.records()),
                                s.train.type_catalog, users=s.users, poi_catalog=s.train.poi_catalog)


# -- scenarios ---------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    n_agents: int = 200
    train_days: int = 30
    test_days: int = 14
    anomaly_fraction: float = 0.1
    kinds: tuple[str, ...] = (HUNGER, WORK, SOCIAL)
    intensity: str = RED
    n_pois: int | None = None
    imposter_pairs: int = 0

    def pois(self) -> int:
        return self.n_pois if self.n_pois is not None else max(4, self.n_agents)


def scenario_specs(scenario: Scenario, seed: int, start: float = DEFAULT_START) -> list[AnomalySpec]:
    """Pick affected agents at random and split them evenly across kinds."""
    rng = np.random.default_rng([seed, 99])
    order = [f"agent{i:04d}" for i in rng.permutation(scenario.n_agents)]
    n_anom = int(round(scenario.anomaly_fraction * scenario.n_agents))
    t_split = start + scenario.train_days * 86400.0
    specs = []
    chosen = order[:n_anom]
    if scenario.kinds and n_anom:
        for kind, group in zip(scenario.kinds, np.array_split(np.array(chosen, dtype=object),
                                                              len(scenario.kinds))):
            if len(group):
                specs.append(AnomalySpec(kind, scenario.intensity, tuple(group), t_split))
    if scenario.imposter_pairs:
        rest = order[n_anom:n_anom + 2 * scenario.imposter_pairs]
        if len(rest) < 2 * scenario.imposter_pairs:
            raise SynthError("not enough agents for the requested imposter pairs")
        specs.append(AnomalySpec(IMPOSTER, RED, tuple(rest), t_split))
    return specs


def generate_scenario(scenario: Scenario, seed: int) -> LabeledDataset:
    world = generate_world(scenario.pois(), seed)
    labeled = simulate(world, scenario.n_agents, scenario.train_days, scenario.test_days,
                       scenario_specs(scenario, seed), seed)
    manifest = dict(labeled.manifest)
    manifest["scenario"] = {**asdict(scenario), "kinds": list(scenario.kinds)}
    return LabeledDataset(labeled.split, labeled.labels, manifest)


# -- files -------------------------------------------------------------------------

def write_labels(labels: Mapping[str, Label], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "kind", "intensity"])
        for u in sorted(labels):
            w.writerow([u, labels[u].kind, labels[u].intensity])


def read_labels(path) -> dict[str, Label]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["user_id"]: Label(row["kind"] or NORMAL, row.get("intensity") or "")
                for row in csv.DictReader(fh)}


def write_manifest(manifest: Mapping, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
