"""The four packaged experiment scenarios.

Each scenario ships a fully seeded spec plus the scripted-driver rule tables
that make it reproducible without any model server: opinion polarization
under exposure regimes, inflammatory-message spread under moderation
policies, a UBI intervention with a no-UBI twin, and a hurricane shock on
mobility.
"""

from __future__ import annotations

from .engine import EconSetup, ExperimentSpec, ScenarioConfig, ScenarioRef
from .mind.driver import ScriptedRules
from .social import spread_reach
from .toolbox import Intervention, cesd_survey, score_cesd
from .util import stable_hash64

SCENARIO_NAMES = ("polarization", "inflammatory", "ubi", "hurricane")

OPINION_TOPIC = "gun control"
INFLAMMATORY_TAG = "chained-incident"

NO_NEEDS = {n: 0.0 for n in ("hungry", "tired", "safe", "social", "whatever")}


class ScenarioError(ValueError):
    pass


def build_scenario(name: str, params: dict | None = None) -> ExperimentSpec:
    """A ready-to-run, fully seeded spec for one packaged scenario."""
    params = dict(params or {})
    if name not in SCENARIO_NAMES:
        raise ScenarioError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")
    defaults = {
        "polarization": {"population_size": 300, "round_count": 20},
        "inflammatory": {"population_size": 200, "round_count": 15},
        "ubi": {"population_size": 100, "round_count": 120},
        "hurricane": {"population_size": 1000, "round_count": 18},
    }[name]
    seed = int(params.pop("seed", 42))
    output_dir = params.pop("output_dir", None)
    condition = params.get("condition", "")
    exp_id = params.pop("experiment_id",
                        f"{name}-{condition}-{seed}" if condition else f"{name}-{seed}")
    spec = ExperimentSpec(
        experiment_id=exp_id, name=f"{name} scenario", seed=seed,
        population_size=int(params.pop("population_size", defaults["population_size"])),
        group_count=int(params.pop("group_count", 1)),
        round_count=int(params.pop("round_count", defaults["round_count"])),
        round_duration=float(params.pop("round_duration", 1800.0)),
        scenario=ScenarioRef(name=name, params=params),
        mind_backend="scripted", output_dir=output_dir)
    spec.validate()
    return spec


def build_scenario_config(name: str, params: dict | None = None) -> ScenarioConfig:
    params = dict(params or {})
    if name == "polarization":
        return _polarization_config(params)
    if name == "inflammatory":
        return _inflammatory_config(params)
    if name == "ubi":
        return _ubi_config(params)
    if name == "hurricane":
        return _hurricane_config(params)
    raise ScenarioError(f"unknown scenario {name!r}")


# -- polarization ----------------------------------------------------------------


def _polarization_config(params: dict) -> ScenarioConfig:
    condition = params.get("condition", "control")
    if condition not in ("control", "homophilic", "heterogeneous"):
        raise ScenarioError(f"unknown polarization condition {condition!r}")

    initial = {
        # Starting scores leave headroom for twenty rounds of drift.
        "control": (3, 7),
        "homophilic": (4, 6),
        "heterogeneous": (1, 9),
    }[condition]

    def attitudes(index: int, rng) -> dict:
        return {OPINION_TOPIC: initial[index % 2]}

    def delivery_filter(recipient, body) -> bool:
        if body.get("kind") != "stance" or condition == "control":
            return True
        own = recipient.attitudes.get(OPINION_TOPIC, 5) - 5
        theirs = int(body.get("score", 5)) - 5
        aligned = own * theirs > 0
        return aligned if condition == "homophilic" else not aligned

    def edges(agent_ids, rng):
        n = len(agent_ids)
        records = []
        for i, a in enumerate(agent_ids):
            for step in (1, 2):
                b = agent_ids[(i + step) % n]
                records.append((a, b, "friend", 50))
        return records

    def mean_polarization(exp, report):
        total = sum(abs(exp.agents[a].attitudes.get(OPINION_TOPIC, 5) - 5)
                    for a in exp.agent_ids)
        exp.record_metric("mean_polarization", total / len(exp.agent_ids),
                          step=report.round_index)

    rules = ScriptedRules(opinion_topic=OPINION_TOPIC, opinion_fanout=2,
                          conviction_period=5, need_rates=dict(NO_NEEDS))
    return ScenarioConfig(
        name="polarization", rules=rules, attitude_maker=attitudes,
        edge_maker=edges, delivery_filter=delivery_filter,
        net_kwargs={"nx": 2, "ny": 2, "block": 200.0}, env_dt=60.0,
        metric_hooks=[mean_polarization])


# -- inflammatory spread ------------------------------------------------------------


def _inflammatory_config(params: dict) -> ScenarioConfig:
    policy = params.get("condition", params.get("policy", "none"))
    if policy not in ("none", "node", "edge"):
        raise ScenarioError(f"unknown moderation policy {policy!r}")
    detect_pct = int(params.get("detect_pct", 50))
    seed_count = int(params.get("seed_count", 4))
    degree_half = int(params.get("degree_half", 5))

    def classifier(sender: str, recipient: str, body: dict) -> bool:
        if body.get("kind") != "tagged":
            return False
        return stable_hash64("detect", sender, recipient,
                             body.get("tag", "")) % 100 < detect_pct

    def edges(agent_ids, rng):
        n = len(agent_ids)
        records = []
        for i, a in enumerate(agent_ids):
            for step in range(1, degree_half + 1):
                records.append((a, agent_ids[(i + step) % n], "friend", 50))
        return records

    def seeds_for(population: int) -> list[str]:
        stride = max(1, population // seed_count)
        return [f"a{(k * stride) % population}" for k in range(seed_count)]

    def reach_hook(exp, report):
        seeds = seeds_for(len(exp.agent_ids))
        counts = spread_reach(exp.message_log, report.round_index + 1,
                              tag=INFLAMMATORY_TAG, seeds=seeds)
        exp.record_metric("reach", counts[-1], step=report.round_index)

    rules = ScriptedRules(forward_tagged=True, need_rates=dict(NO_NEEDS))
    seeds = seeds_for(int(params.get("population_size", 200)))
    intervention = Intervention(
        variant="message-notification", round=0, targets=seeds,
        message_text="A shocking incident is being shared everywhere.",
        message_meta={"kind": "tagged", "tag": INFLAMMATORY_TAG})
    return ScenarioConfig(
        name="inflammatory", rules=rules, edge_maker=edges,
        supervisor_policy=policy, ban_threshold=int(params.get("ban_threshold", 1)),
        classifier=classifier, interventions=[intervention],
        net_kwargs={"nx": 2, "ny": 2, "block": 200.0}, env_dt=60.0,
        metric_hooks=[reach_hook])


# -- universal basic income -----------------------------------------------------------


def _ubi_config(params: dict) -> ScenarioConfig:
    with_ubi = bool(params.get("ubi", True))
    start_step = int(params.get("start_step", 96))
    amount_cents = int(params.get("amount_cents", 100_000))
    survey_from_step = int(params.get("survey_from_step", 90))

    # Prices and wages are held fixed so the twin comparison isolates the
    # transfer itself; price adjustment is exercised elsewhere.
    econ = EconSetup(enabled=True, firm_count=5, month_rounds=1,
                     interest_every_steps=12, auto_consume=True,
                     adjust_prices=False, agent_cash_cents=200_000,
                     ubi_start_step=start_step if with_ubi else None,
                     ubi_amount_cents=amount_cents)

    survey = cesd_survey("cesd-wellbeing")

    def depression_hook(exp, report):
        step = report.round_index + 1
        if step < survey_from_step and step % 12 != 0:
            return
        scores = []
        for agent_id in exp.agent_ids:
            answers = exp.agents[agent_id].answer_survey(survey.to_dict())
            scores.append(score_cesd(answers))
        exp.record_metric("mean_cesd", sum(scores) / len(scores),
                          step=report.round_index)

    rules = ScriptedRules(need_rates=dict(NO_NEEDS), work_base=0.5,
                          consume_base=0.4, consume_cash_coeff=0.3,
                          cesd_strain_scale=400_000)
    return ScenarioConfig(
        name="ubi", rules=rules, econ=econ,
        net_kwargs={"nx": 2, "ny": 2, "block": 200.0}, env_dt=60.0,
        metric_hooks=[depression_hook])


# -- hurricane -----------------------------------------------------------------------


def _hurricane_config(params: dict) -> ScenarioConfig:
    phase_rounds = int(params.get("phase_rounds", 6))
    shock_start = phase_rounds
    shock_end = 2 * phase_rounds

    rules = ScriptedRules(
        need_rates=dict(NO_NEEDS), travel_mode="walk",
        search_radius_m=float(params.get("search_radius_m", 1500.0)),
        travel_propensity={"clear": float(params.get("travel_clear", 0.35)),
                           "hurricane": float(params.get("travel_shock", 0.06))})

    # The weather flips one round before each measured phase so that trips
    # already planned under the previous regime do not bleed into the next
    # window (plans issued in round r start moving in round r+1).
    timeline = {0: "clear", shock_start - 1: "hurricane", shock_end - 1: "clear"}
    notices = [
        Intervention(variant="message-notification", round=shock_start - 1,
                     message_text="Severe weather changes expected, a hurricane is coming"),
        Intervention(variant="message-notification", round=shock_end - 1,
                     message_text="The hurricane has passed; conditions are clearing."),
    ]

    def activity_hook(exp, report):
        duration = exp.spec.round_duration
        t1 = exp.sim_time
        t0 = t1 - duration
        travelers = exp.urban.travelers_in_window(t0, t1 - 1e-9)
        exp.record_metric("activity", len(travelers) / len(exp.agent_ids),
                          step=report.round_index)
        rnd = report.round_index
        if rnd in (shock_start - 1, shock_end - 1, 3 * phase_rounds - 1):
            w0 = t1 - phase_rounds * duration
            phase_travelers = exp.urban.travelers_in_window(w0, t1 - 1e-9)
            exp.record_metric("phase_activity",
                              len(phase_travelers) / len(exp.agent_ids), step=rnd)

    return ScenarioConfig(
        name="hurricane", rules=rules, weather_timeline=timeline,
        weather_radius={"hurricane": float(params.get("radius_multiplier", 0.3))},
        interventions=notices,
        net_kwargs={"nx": 5, "ny": 5, "block": 300.0, "pois_per_road": 3},
        env_dt=float(params.get("env_dt", 5.0)),
        metric_hooks=[activity_hook])
