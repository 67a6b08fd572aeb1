"""Synthetic check-in world with planted transition structure.

The generator emits a chronological check-in log whose 8:1:1 chronological
split has known properties:

* Users walk inside home clusters of community POIs, creating dense head
  transitions, and frequently revisit personal favorites, creating tail
  transitions that are recoverable from the user's own history.
* Each withheld source->destination pair routes through a dedicated
  gateway POI ``g`` and intermediate hub ``h``: the legs ``g -> h`` and
  ``h -> d`` are planted in the training region while the direct pair
  ``(g, d)`` never appears there, so two-hop propagation from ``g``
  concentrates exactly on the withheld destinations. The two legs are
  always emitted in separate trajectories, so no training window ever
  shows the gateway and the destination together; composing the legs
  through the transition graph is the only way to associate them.
* Separate teacher units (gateway, hub, visible destination) plant the
  same two-hop shape plus a direct edge to the destination, producing
  training cases in which the propagated two-hop evidence names the
  target. These supervise the model's use of the graph token.
* In the test region each withheld pair is finally emitted as a
  trajectory-ending transition by a user who has never visited the
  destination, so only the transition-graph signal can recover it.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400
TRAJECTORY_GAP_HOURS = 36     # inter-burst per-user spacing, beyond the 24h cut
BASE_TIME = 1_600_000_000     # fixed origin so runs are byte-identical
PAIRS_PER_GATEWAY = 2


class SynthSpecError(ValueError):
    """The requested world cannot honor its own invariants."""


@dataclass
class SyntheticWorldSpec:
    num_users: int = 50
    num_pois: int = 200
    num_checkins: int = 20000
    num_withheld_pairs: int = 100
    num_clusters: int = 12
    revisit_prob: float = 0.40
    away_favorite_prob: float = 0.20
    exploration_prob: float = 0.10
    num_away_favorites: int = 4
    num_teacher_units: int = 20
    traversals_per_triple: int = 2
    teacher_bursts: int = 2
    burst_len_min: int = 3
    burst_len_max: int = 8
    seed: int = 3407

    @property
    def num_gateways(self) -> int:
        return -(-self.num_withheld_pairs // PAIRS_PER_GATEWAY)

    def validate(self) -> None:
        community = (self.num_pois - 2 * self.num_gateways
                     - 2 * self.num_teacher_units)
        if self.num_clusters < 2:
            raise SynthSpecError("need at least 2 clusters to separate pair endpoints")
        if community < 3 * self.num_clusters:
            raise SynthSpecError(
                "not enough POIs for gateways, intermediates, teacher units, "
                f"and {self.num_clusters} clusters ({self.num_pois} POIs, "
                f"{self.num_withheld_pairs} withheld pairs)")
        if self.num_users < self.num_clusters:
            raise SynthSpecError("need at least one user per cluster")
        planted_bursts = (
            self.num_gateways * (PAIRS_PER_GATEWAY + 1) * self.traversals_per_triple
            + self.num_teacher_units * 3 * self.teacher_bursts)
        if self.num_checkins < max(1000, planted_bursts * 8):
            raise SynthSpecError("num_checkins too small for the planted structure")
        if not (2 <= self.burst_len_min <= self.burst_len_max):
            raise SynthSpecError("burst lengths must satisfy 2 <= min <= max")


@dataclass
class _User:
    index: int
    home_cluster: int
    favorites: list[int]
    away_favorites: list[int]
    blocked: set[int] = field(default_factory=set)
    visited: list[int] = field(default_factory=list)
    last_ts: int = 0


@dataclass
class WorldTruth:
    withheld_pairs: list[tuple[int, int]]    # (gateway, destination)
    intermediates: list[int]                 # hub per pair
    emitters: list[int]                      # user index per pair
    teachers: list[tuple[int, int, int]]     # (gateway, hub, visible dest)

    def to_json(self, poi_name, user_name) -> dict:
        return {
            "withheld_pairs": [[poi_name(s), poi_name(d)] for s, d in self.withheld_pairs],
            "planted_triples": [
                [poi_name(s), poi_name(m), poi_name(d)]
                for (s, d), m in zip(self.withheld_pairs, self.intermediates)
            ],
            "emitters": [user_name(u) for u in self.emitters],
            "visible_teachers": [
                [poi_name(g), poi_name(h), poi_name(v)] for g, h, v in self.teachers
            ],
        }


class WorldGenerator:
    def __init__(self, spec: SyntheticWorldSpec):
        spec.validate()
        self.spec = spec
        self.rng = random.Random(spec.seed)

        community = (spec.num_pois - 2 * spec.num_gateways
                     - 2 * spec.num_teacher_units)
        self.clusters: list[list[int]] = [[] for _ in range(spec.num_clusters)]
        for poi in range(community):
            self.clusters[poi % spec.num_clusters].append(poi)
        self.cluster_of = {p: c for c, members in enumerate(self.clusters) for p in members}
        self._community = list(range(community))
        base = community
        self.gateways = list(range(base, base + spec.num_gateways))
        base += spec.num_gateways
        self.hubs = list(range(base, base + spec.num_gateways))
        base += spec.num_gateways
        self.teacher_gateways = list(range(base, base + spec.num_teacher_units))
        base += spec.num_teacher_units
        self.teacher_hubs = list(range(base, base + spec.num_teacher_units))

        self.users = self._make_users()
        self.truth = self._plant_pairs()
        self.forbidden = set(self.truth.withheld_pairs)

        self.rows: list[tuple[int, int, int]] = []   # (user, poi, ts)
        self.clock = BASE_TIME

    # -- world setup --------------------------------------------------------

    def _make_users(self) -> list[_User]:
        users = []
        for u in range(self.spec.num_users):
            home = u % self.spec.num_clusters
            favorites = self.rng.sample(self.clusters[home], k=min(3, len(self.clusters[home])))
            away_pool = [p for c, members in enumerate(self.clusters)
                         for p in members if c != home]
            away = self.rng.sample(away_pool,
                                   k=min(self.spec.num_away_favorites, len(away_pool)))
            users.append(_User(index=u, home_cluster=home,
                               favorites=favorites, away_favorites=away))
        return users

    def _plant_pairs(self) -> WorldTruth:
        spec = self.spec
        pairs: list[tuple[int, int]] = []
        intermediates: list[int] = []
        emitters: list[int] = []
        used_dests: dict[int, set[int]] = {g: set() for g in self.gateways}

        for i in range(spec.num_withheld_pairs):
            group = i // PAIRS_PER_GATEWAY
            gateway = self.gateways[group]
            hub = self.hubs[group]
            emitter = self.users[i % len(self.users)]
            for _ in range(500):
                away_clusters = [c for c in range(spec.num_clusters)
                                 if c != emitter.home_cluster]
                dest = self.rng.choice(self.clusters[self.rng.choice(away_clusters)])
                if dest in emitter.away_favorites or dest in emitter.blocked:
                    continue
                if dest not in used_dests[gateway]:
                    break
            else:
                raise SynthSpecError("could not place distinct withheld destinations")
            used_dests[gateway].add(dest)
            emitter.blocked.add(dest)
            pairs.append((gateway, dest))
            intermediates.append(hub)
            emitters.append(emitter.index)

        blocked_union = set().union(*(u.blocked for u in self.users))
        teachers = []
        for unit in range(spec.num_teacher_units):
            for _ in range(500):
                visible = self.rng.choice(self._community)
                if visible not in blocked_union:
                    break
            else:
                raise SynthSpecError("could not place visible teacher destinations")
            teachers.append((self.teacher_gateways[unit], self.teacher_hubs[unit], visible))
        return WorldTruth(withheld_pairs=pairs, intermediates=intermediates,
                          emitters=emitters, teachers=teachers)

    # -- emission helpers ----------------------------------------------------

    def _advance_clock_for(self, user: _User) -> int:
        """Next burst start: ahead of the global clock, clear of the user's
        previous burst by more than the trajectory gap, and in daytime."""
        start = self.clock + self.rng.randint(2, 8) * SECONDS_PER_HOUR
        min_user_ts = user.last_ts + TRAJECTORY_GAP_HOURS * SECONDS_PER_HOUR
        start = max(start, min_user_ts)
        hour = (start % SECONDS_PER_DAY) // SECONDS_PER_HOUR
        if hour < 7:
            start += (7 - hour) * SECONDS_PER_HOUR
        elif hour > 22:
            start += (31 - hour) * SECONDS_PER_HOUR
        return start

    def _emit(self, user: _User, poi: int, ts: int) -> int:
        self.rows.append((user.index, poi, ts))
        # Only community POIs enter the revisit pool; gateways and hubs keep
        # their outgoing edges exactly as planted.
        if poi < len(self._community):
            user.visited.append(poi)
        user.last_ts = ts
        self.clock = max(self.clock, ts)
        return ts + self.rng.randint(20, 90) * 60

    def _legal(self, user: _User, current: int | None, candidate: int) -> bool:
        if candidate in user.blocked:
            return False
        if current is not None and (current, candidate) in self.forbidden:
            return False
        return current is None or candidate != current

    def _walk_step(self, user: _User, current: int | None) -> int:
        """Pick the next POI: revisit a favorite or any previously visited
        POI, jump to an away favorite, explore a random community POI, or
        move inside the home cluster. All draws honor the guards."""
        spec = self.spec
        for _ in range(30):
            roll = self.rng.random()
            if roll < spec.revisit_prob and user.visited:
                pool = user.favorites if self.rng.random() < 0.6 else user.visited
                candidate = self.rng.choice(pool)
            elif roll < spec.revisit_prob + spec.away_favorite_prob:
                candidate = self.rng.choice(user.away_favorites)
            elif roll < spec.revisit_prob + spec.away_favorite_prob + spec.exploration_prob:
                candidate = self.rng.choice(self._community)
            else:
                candidate = self.rng.choice(self.clusters[user.home_cluster])
            if self._legal(user, current, candidate):
                return candidate
        for candidate in self.rng.sample(self.clusters[user.home_cluster],
                                         len(self.clusters[user.home_cluster])):
            if self._legal(user, current, candidate):
                return candidate
        raise SynthSpecError("walk has no legal move; world too constrained")

    def _pick_user(self, eligible: list[_User] | None = None) -> _User:
        pool = self.users if eligible is None else eligible
        if not pool:
            raise SynthSpecError("no eligible user for a planted path")
        return self.rng.choice(pool)

    def _prefix_walk(self, user: _User, ts: int, length: int,
                     before: int) -> tuple[int | None, int]:
        """Short in-cluster walk whose last step may legally precede
        ``before``; steps that would complete a withheld adjacency with
        ``before`` are skipped."""
        current = None
        for _ in range(length):
            step = self._walk_step(user, current)
            if step == before or (step, before) in self.forbidden:
                continue
            current = step
            ts = self._emit(user, current, ts)
        return current, ts

    # -- burst kinds ---------------------------------------------------------

    def _walk_burst(self, budget_left: int) -> None:
        user = self._pick_user()
        length = min(self.rng.randint(self.spec.burst_len_min, self.spec.burst_len_max),
                     budget_left)
        ts = self._advance_clock_for(user)
        current = None
        for _ in range(length):
            current = self._walk_step(user, current)
            ts = self._emit(user, current, ts)

    def _planted_burst(self, tail: tuple[int, ...], exclude_dest: int | None = None) -> None:
        """Emit prefix walk + the given forced POI path in one trajectory."""
        eligible = ([u for u in self.users if exclude_dest not in u.blocked]
                    if exclude_dest is not None else None)
        user = self._pick_user(eligible)
        ts = self._advance_clock_for(user)
        _, ts = self._prefix_walk(user, ts, self.rng.randint(1, 2), tail[0])
        for poi in tail:
            ts = self._emit(user, poi, ts)

    def _planted_emission_burst(self, pair_idx: int) -> None:
        """Emit the withheld pair itself as the final transition of one of
        the emitter's test trajectories."""
        gateway, dest = self.truth.withheld_pairs[pair_idx]
        user = self.users[self.truth.emitters[pair_idx]]
        ts = self._advance_clock_for(user)
        _, ts = self._prefix_walk(user, ts, self.rng.randint(1, 3), gateway)
        user.blocked.discard(dest)
        ts = self._emit(user, gateway, ts)
        self._emit(user, dest, ts)

    # -- phases --------------------------------------------------------------

    def _planted_train_bursts(self) -> list[tuple[tuple[int, ...], int | None]]:
        """All training-region planted paths.

        The two legs of a withheld pair are separate trajectories: first
        legs end at the hub, second legs start at the hub. No window ever
        contains both the gateway and a withheld destination, so the pair
        is only recoverable by composing the legs through the graph.
        Teacher units plant the same two-hop shape plus a direct edge, so
        their propagated evidence names a supervised target.
        """
        spec = self.spec
        bursts: list[tuple[tuple[int, ...], int | None]] = []
        seen_first_leg = set()
        # Second legs repeat the hub (a double check-in) so hubs carry
        # two-hop mass themselves: the propagated evidence at a gateway then
        # names the hub it leads to as well as the final destinations.
        for (gateway, dest), hub in zip(self.truth.withheld_pairs,
                                        self.truth.intermediates):
            if gateway not in seen_first_leg:
                seen_first_leg.add(gateway)
                for _ in range(spec.traversals_per_triple):
                    bursts.append(((gateway, hub), None))       # first leg
            for _ in range(spec.traversals_per_triple):
                bursts.append(((hub, hub, dest), dest))         # second leg
        for gateway, hub, visible in self.truth.teachers:
            for _ in range(spec.teacher_bursts):
                bursts.append(((gateway, hub), None))           # first leg
                bursts.append(((hub, hub, visible), None))      # second leg
                bursts.append(((gateway, visible), None))       # supervised decode
        self.rng.shuffle(bursts)
        return bursts

    def generate(self) -> None:
        spec = self.spec
        train_end = int(0.8 * spec.num_checkins)
        val_end = int(0.9 * spec.num_checkins)

        # Touch every user once so each one exists in the training vocabulary.
        for user in self.users:
            if len(self.rows) < train_end - spec.burst_len_max:
                ts = self._advance_clock_for(user)
                current = None
                for _ in range(spec.burst_len_min):
                    current = self._walk_step(user, current)
                    ts = self._emit(user, current, ts)

        planted = self._planted_train_bursts()
        # Keep planted paths clear of the split cut: finish them early.
        deadline = int(0.7 * train_end)
        while len(self.rows) < train_end:
            budget = train_end - len(self.rows)
            if planted and (len(self.rows) >= deadline or self.rng.random() < 0.5):
                if budget < spec.burst_len_max + 3:
                    raise SynthSpecError(
                        "training region too small to plant all two-hop paths")
                tail, dest = planted.pop()
                self._planted_burst(tail, exclude_dest=dest)
            else:
                self._walk_burst(budget)

        while len(self.rows) < val_end:
            self._walk_burst(val_end - len(self.rows))

        plants = list(range(spec.num_withheld_pairs))
        self.rng.shuffle(plants)
        while len(self.rows) < spec.num_checkins:
            budget = spec.num_checkins - len(self.rows)
            if plants:
                if budget < spec.burst_len_max + 5:
                    raise SynthSpecError("test region too small for planted pairs")
                self._planted_emission_burst(plants.pop())
            else:
                self._walk_burst(budget)

    # -- output --------------------------------------------------------------

    def poi_name(self, poi: int) -> str:
        return f"p{poi:04d}"

    def user_name(self, user: int) -> str:
        return f"u{user:03d}"

    def category_name(self, poi: int) -> str:
        cluster = self.cluster_of.get(poi)
        if cluster is not None:
            return f"c{cluster:02d}"
        gateway_set = set(self.gateways) | set(self.teacher_gateways)
        return "gateway" if poi in gateway_set else "hub"

    def coordinates(self, poi: int) -> tuple[float, float]:
        cluster = self.cluster_of.get(poi)
        coord_rng = random.Random((self.spec.seed << 20) ^ poi)
        if cluster is None:
            return (round(40.0 + coord_rng.uniform(-0.5, 0.5), 6),
                    round(-74.5 + coord_rng.uniform(-0.5, 0.5), 6))
        return (round(40.5 + cluster * 0.05 + coord_rng.uniform(-0.01, 0.01), 6),
                round(-74.0 + cluster * 0.05 + coord_rng.uniform(-0.01, 0.01), 6))


def generate_world(spec: SyntheticWorldSpec) -> tuple[list[str], dict]:
    """Produce raw check-in rows (CSV lines) and the ground-truth sidecar."""
    gen = WorldGenerator(spec)
    gen.generate()
    lines = []
    for user, poi, ts in gen.rows:
        lat, lon = gen.coordinates(poi)
        lines.append(f"{gen.user_name(user)},{gen.poi_name(poi)},"
                     f"{gen.category_name(poi)},{lat},{lon},{ts}")
    truth = gen.truth.to_json(gen.poi_name, gen.user_name)
    truth["num_checkins"] = len(lines)
    truth["seed"] = spec.seed
    return lines, truth


def write_world(spec: SyntheticWorldSpec, output_file: str | Path,
                sidecar_file: str | Path) -> dict:
    lines, truth = generate_world(spec)
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(Path(sidecar_file), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return truth
