"""Benchmark workloads: YCSB-T style transfers and a travel-reservation workflow."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any

from .core import NamespacedKey
from .runtime import Operator

# -- operators -------------------------------------------------------------------


class InsufficientFunds(Exception):
    pass


class SoldOut(Exception):
    pass


def ycsbt_operators(n_partitions: int = 16) -> list[Operator]:
    account = Operator("account", n_partitions)

    @account.register
    def transfer(ctx, creditor, amount):
        balance = ctx.get(0)
        if balance < amount:
            raise InsufficientFunds(f"account {ctx.key} has {balance}, needs {amount}")
        ctx.put(balance - amount)
        ctx.call_async(account, "deposit", creditor, (amount,))
        return balance - amount

    @account.register
    def deposit(ctx, amount):
        balance = ctx.get(0)
        ctx.put(balance + amount)
        return balance + amount

    @account.register
    def balance(ctx):
        return ctx.get(0)

    return [account]


def travel_operators(n_partitions: int = 16) -> list[Operator]:
    user = Operator("user", n_partitions)
    hotel = Operator("hotel", n_partitions)
    flight = Operator("flight", n_partitions)

    @user.register
    def make_reservation(ctx, hotel_id, flight_id):
        ctx.call_async(hotel, "reserve_hotel", hotel_id)
        ctx.call_async(flight, "reserve_flight", flight_id)
        trips = ctx.get(())
        ctx.put(trips + ((hotel_id, flight_id),))
        return len(trips) + 1

    def _take_one(ctx, what):
        left = ctx.get(0)
        if left <= 0:
            raise SoldOut(f"{what} {ctx.key} sold out")
        ctx.put(left - 1)
        return left - 1

    @hotel.register
    def reserve_hotel(ctx):
        return _take_one(ctx, "hotel")

    @flight.register
    def reserve_flight(ctx):
        return _take_one(ctx, "flight")

    return [user, hotel, flight]


# -- key distributions -----------------------------------------------------------


class ZipfianGenerator:
    """Gray et al. closed-form Zipf sampler over ``[0, n)``; ``theta=0`` is uniform."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        if n < 1:
            raise ValueError("n must be positive")
        if not 0.0 <= theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        self.n, self.theta, self.rng = n, theta, rng
        self.zetan = self.zeta(n, theta)
        self.alpha = 1.0 / (1.0 - theta)
        zeta2 = self.zeta(min(n, 2), theta)
        if n > 2:
            self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta2 / self.zetan)
        else:
            self.eta = 1.0

    @staticmethod
    def zeta(n: int, theta: float) -> float:
        return math.fsum(1.0 / (i ** theta) for i in range(1, n + 1))

    def __call__(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if self.n > 1 and uz < 1.0 + 0.5 ** self.theta:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


def parse_dist(text: str) -> float:
    """``uniform`` -> 0.0, ``zipf:<theta>`` -> theta."""
    if text == "uniform":
        return 0.0
    name, _, value = text.partition(":")
    if name not in ("zipf", "zipfian") or not value:
        raise ValueError(f"unknown distribution {text!r}")
    return float(value)


# -- specs -----------------------------------------------------------------------


@dataclass
class WorkloadSpec:
    kind: str = "ycsbt"
    n_keys: int = 10_000
    n_txns: int = 1000
    theta: float = 0.0
    # requests per logical millisecond
    rate: float = 1000.0
    seed: int = 0
    initial_balance: int = 1_000_000
    amount: int = 1
    n_partitions: int = 16

    def __post_init__(self) -> None:
        if self.kind not in ("ycsbt", "travel"):
            raise ValueError(f"unknown workload {self.kind!r}")
        if self.n_keys < 2:
            raise ValueError("need at least two keys")
        if self.n_txns < 0 or self.rate <= 0:
            raise ValueError("n_txns must be >= 0 and rate > 0")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")


@dataclass
class Request:
    request_id: Any
    operator: str
    key: str
    function_name: str
    params: tuple
    arrival_ms: float


@dataclass
class Workload:
    spec: WorkloadSpec
    operators: list[Operator]
    initial_state: dict[NamespacedKey, Any]
    requests: list[Request] = field(default_factory=list)

    def submit_to(self, cluster) -> None:
        cluster.load_state(self.initial_state)
        for r in self.requests:
            cluster.submit(r.request_id, r.operator, r.key, r.function_name, r.params, r.arrival_ms)


def _arrival(i: int, rate: float) -> float:
    return i / rate


def build_workload(spec: WorkloadSpec) -> Workload:
    rng = random.Random(spec.seed)
    if spec.kind == "ycsbt":
        ops = ycsbt_operators(spec.n_partitions)
        state = {NamespacedKey("account", str(k)): spec.initial_balance for k in range(spec.n_keys)}
        zipf = ZipfianGenerator(spec.n_keys, spec.theta, rng)
        reqs = []
        for i in range(spec.n_txns):
            debtor = rng.randrange(spec.n_keys)
            creditor = zipf()
            while creditor == debtor:
                creditor = zipf()
            reqs.append(Request(f"r{i}", "account", str(debtor), "transfer",
                                (str(creditor), spec.amount), _arrival(i, spec.rate)))
        return Workload(spec, ops, state, reqs)
    ops = travel_operators(spec.n_partitions)
    # availability is tight enough that some reservations abort
    n_items = max(1, spec.n_keys // 4)
    capacity = max(1, spec.n_txns // n_items // 2)
    state = {}
    for k in range(n_items):
        state[NamespacedKey("hotel", str(k))] = capacity
        state[NamespacedKey("flight", str(k))] = capacity
    zipf = ZipfianGenerator(n_items, spec.theta, rng)
    reqs = [Request(f"r{i}", "user", str(rng.randrange(spec.n_keys)), "make_reservation",
                    (str(zipf()), str(zipf())), _arrival(i, spec.rate))
            for i in range(spec.n_txns)]
    return Workload(spec, ops, state, reqs)


def total_balance(state: dict) -> int:
    return sum(v for k, v in state.items() if k.operator == "account")
