"""Ground-truth confounded cohort simulator.

The default scenario (see ``default_scenario.json``, where every constant
lives) crosses 2 response phenotypes with 3 severity levels. Severity does
a birth-death walk whose drift depends on how well the dose fits the
phenotype; discharge absorbs below the lowest severity, death above the
highest. The behavior policy doses by latent acuity (severity plus a
phenotype bump), creating the classic confound: sicker patients get more
aggressive treatment and still die more often. Emitted features carry
severity always, and the phenotype only when ``observability`` is on, so a
pipeline fit on the blinded cohort must pool the phenotypes into shared
states. Doses are emitted as bin midpoints of the reference action grid,
making discretization exactly invertible on simulated data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .actions import REFERENCE_GRID, action_id, bin_midpoints
from .data import ClinicalLabel, Dataset, Episode, Terminal, Transition, make_dataset
from .errors import DataError

N_DOSE_LEVELS = 4


def load_default_scenario() -> dict:
    with resources.files("treatq").joinpath("default_scenario.json").open("r") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class SimConfig:
    n_patients: int
    max_steps: int = 100
    confound: float = 1.0
    observability: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise DataError("n_patients must be >= 1")
        if self.max_steps < 1:
            raise DataError("max_steps must be >= 1")
        if not 0.0 <= self.confound <= 1.0:
            raise DataError("confound strength must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class GroundTruthMdp:
    """True latent chain: 6 latent states (phenotype-major: l = phenotype*3
    + severity) plus absorbing discharge (6) and death (7).

    The clinician doses by acuity read off the full noisy feature vector
    (including the phenotype block even when the recorded dataset drops it),
    so treatment intensity is confounded with everything the features
    carry. ``behavior`` is the exact per-latent marginal of that rule,
    integrated over emission noise."""

    kernel: np.ndarray  # (6, 4, 8)
    behavior: np.ndarray  # (6, 4) marginal dose distribution per latent
    start: np.ndarray  # (6,)
    emission_means: np.ndarray  # (6, d)
    noise_scale: float
    phenotype_dims: tuple[int, ...]  # feature columns dropped when blinded
    nuisance_dims: tuple[int, ...]  # patient-level artifact block (outcome-irrelevant)
    nuisance_scale: float
    acuity_vector: np.ndarray  # (d,) perceived acuity = clip(u . x, 0, 1)
    acuity_sd: float  # sd of u . noise
    confound: float
    behavior_temperature: float
    labels: tuple[ClinicalLabel, ...]  # per latent state
    dose_fluid: np.ndarray  # bin-midpoint fluid_ml per dose level
    dose_vis: np.ndarray
    dose_fluid_range: np.ndarray  # (4, 2) sampling interval per dose level
    dose_vis_range: np.ndarray
    dose_action_ids: np.ndarray  # action id per dose level (reference grid)
    scenario: dict

    @property
    def n_latent(self) -> int:
        return self.kernel.shape[0]

    @property
    def discharge(self) -> int:
        return self.n_latent

    @property
    def death(self) -> int:
        return self.n_latent + 1

    def dose_level_of_action(self, action: int) -> int:
        """Inverse of the dose-level -> action-id mapping; -1 if unmapped."""
        hits = np.nonzero(self.dose_action_ids == action)[0]
        return int(hits[0]) if len(hits) else -1


def _bin_edges(cutoffs, closed_bottom: bool) -> list[tuple[float, float]]:
    """(lo, hi] sampling interval per bin; the open top bin ends at 1.5x its
    lower cutoff. With closed_bottom=False the first bin is the exact-zero bin."""
    edges = [] if closed_bottom else [(0.0, 0.0)]
    lo = 0.0
    for c in cutoffs:
        edges.append((lo, float(c)))
        lo = float(c)
    edges.append((lo, lo * 1.5))
    return edges


def _latent_label(phenotype: int, severity: int) -> ClinicalLabel:
    if phenotype == 1:
        return ClinicalLabel.SEPTIC_SHOCK
    if severity >= 1:
        return ClinicalLabel.SEPSIS
    return ClinicalLabel.NON_SEPSIS


def _dose_weights(target: np.ndarray, tau: float) -> np.ndarray:
    """Gaussian preference over dose levels centered at `target` (batched)."""
    target = np.atleast_1d(np.asarray(target, dtype=float))
    w = np.exp(-((np.arange(N_DOSE_LEVELS)[None, :] - target[:, None]) ** 2) / (2 * tau**2))
    return w / w.sum(axis=1, keepdims=True)


def build_ground_truth(config: SimConfig, scenario: dict | None = None) -> GroundTruthMdp:
    """Instantiate the documented default scenario at the requested confound
    strength and observability."""
    sc = scenario if scenario is not None else load_default_scenario()
    n_sev = int(sc["n_severities"])
    n_latent = 2 * n_sev
    improve = {k: np.asarray(v, dtype=float) for k, v in sc["improve_prob"].items()}
    worsen = sc["worsen_weight"]
    names = sc["phenotypes"]

    kernel = np.zeros((n_latent, N_DOSE_LEVELS, n_latent + 2))
    labels = []
    w_phi = float(sc["acuity_phenotype_weight"])
    tau = float(sc["behavior_temperature"])
    for phi in range(2):
        e = improve[names[phi]]
        w = float(worsen[names[phi]])
        for sev in range(n_sev):
            l = phi * n_sev + sev
            labels.append(_latent_label(phi, sev))
            for dose in range(N_DOSE_LEVELS):
                p_down = e[dose]
                p_up = (1.0 - e[dose]) * w
                p_stay = 1.0 - p_down - p_up
                down_to = n_latent if sev == 0 else l - 1  # discharge below
                up_to = n_latent + 1 if sev == n_sev - 1 else l + 1  # death above
                kernel[l, dose, down_to] += p_down
                kernel[l, dose, up_to] += p_up
                kernel[l, dose, l] += p_stay

    sev_load = np.asarray(sc["severity_loadings"], dtype=float)
    phe_load = np.asarray(sc["phenotype_loadings"], dtype=float)
    n_nuisance = int(sc.get("n_nuisance_features", 0))
    n_noise = int(sc["n_noise_features"])
    d = len(sev_load) + len(phe_load) + n_nuisance + n_noise
    means = np.zeros((n_latent, d))
    for phi in range(2):
        for sev in range(n_sev):
            l = phi * n_sev + sev
            means[l, : len(sev_load)] = sev_load * sev
            means[l, len(sev_load) : len(sev_load) + len(phe_load)] = phe_load * phi
    phenotype_dims = tuple(range(len(sev_load), len(sev_load) + len(phe_load)))
    nuisance_dims = tuple(
        range(len(sev_load) + len(phe_load), len(sev_load) + len(phe_load) + n_nuisance)
    )

    # clinician's acuity read-out: least-squares recovery of severity and
    # phenotype from the full noisy features, combined like the true acuity
    noise = float(sc["noise_scale"])
    u = np.zeros(d)
    u[: len(sev_load)] = sev_load / (sev_load @ sev_load) / (n_sev - 1 + w_phi)
    u[len(sev_load) : len(sev_load) + len(phe_load)] = (
        phe_load / (phe_load @ phe_load) * (w_phi / (n_sev - 1 + w_phi))
    )
    acuity_sd = noise * float(np.linalg.norm(u))

    # exact marginal behavior per latent: Gauss-Hermite over the acuity noise
    nodes, weights = np.polynomial.hermite.hermgauss(64)
    weights = weights / np.sqrt(np.pi)
    behavior = np.zeros((n_latent, N_DOSE_LEVELS))
    for l in range(n_latent):
        mu = float(u @ means[l])
        perceived = np.clip(mu + np.sqrt(2.0) * acuity_sd * nodes, 0.0, 1.0)
        target = config.confound * perceived * (N_DOSE_LEVELS - 1)
        behavior[l] = weights @ _dose_weights(target, tau)

    start = np.zeros(n_latent)
    sev_probs = np.asarray(sc["start_severity_probs"], dtype=float)
    frail = float(sc["frail_fraction"])
    start[:n_sev] = (1.0 - frail) * sev_probs
    start[n_sev:] = frail * sev_probs

    fluid_mid, vis_mid = bin_midpoints(REFERENCE_GRID)
    fluid_edges = _bin_edges(REFERENCE_GRID.fluid_cutoffs, closed_bottom=True)
    vis_edges = _bin_edges(REFERENCE_GRID.vis_cutoffs[1:], closed_bottom=False)
    dose_bins = sc["dose_bins"]
    dose_fluid = np.array([fluid_mid[f - 1] for f, _ in dose_bins])
    dose_vis = np.array([vis_mid[v - 1] for _, v in dose_bins])
    dose_fluid_range = np.array([fluid_edges[f - 1] for f, _ in dose_bins])
    dose_vis_range = np.array([vis_edges[v - 1] for _, v in dose_bins])
    dose_ids = np.array([action_id(f, v) for f, v in dose_bins])

    return GroundTruthMdp(
        kernel=kernel,
        behavior=behavior,
        start=start,
        emission_means=means,
        noise_scale=noise,
        phenotype_dims=phenotype_dims,
        nuisance_dims=nuisance_dims,
        nuisance_scale=float(sc.get("nuisance_scale", 0.0)),
        acuity_vector=u,
        acuity_sd=acuity_sd,
        confound=config.confound,
        behavior_temperature=tau,
        labels=tuple(labels),
        dose_fluid=dose_fluid,
        dose_vis=dose_vis,
        dose_fluid_range=dose_fluid_range,
        dose_vis_range=dose_vis_range,
        dose_action_ids=dose_ids,
        scenario=sc,
    )


@dataclass(frozen=True, eq=False)
class SimulatedCohort:
    dataset: Dataset
    truth: list[tuple[str, int, int]]  # (patient_id, step_index, latent state)

    def truth_by_row(self) -> np.ndarray:
        """Latent state per row in the dataset's canonical row order."""
        return np.array([l for _, _, l in sorted(self.truth)], dtype=int)


def simulate_cohort(gt: GroundTruthMdp, config: SimConfig) -> SimulatedCohort:
    """Sample episodes under the behavior policy; deterministic given seed.

    Each patient uses its own generator seeded by (seed, patient index), so
    per-patient simulation is order-independent. Episodes that hit
    max_steps without absorbing are force-terminated: death if at the top
    severity, discharge otherwise.
    """
    keep = [i for i in range(gt.emission_means.shape[1]) if config.observability or i not in gt.phenotype_dims]
    n_sev = gt.n_latent // 2
    episodes = []
    truth: list[tuple[str, int, int]] = []
    width = max(4, len(str(config.n_patients - 1)))
    for i in range(config.n_patients):
        rng = np.random.default_rng([config.seed, i])
        pid = f"p{i:0{width}d}"
        l = int(rng.choice(gt.n_latent, p=gt.start))
        # patient-level artifact block: persistent random signs, no outcome link
        nuisance = gt.nuisance_scale * (2.0 * rng.integers(0, 2, len(gt.nuisance_dims)) - 1.0)
        transitions = []
        for step in range(config.max_steps):
            features = gt.emission_means[l] + gt.noise_scale * rng.standard_normal(
                gt.emission_means.shape[1]
            )
            features[list(gt.nuisance_dims)] += nuisance
            # the clinician doses by acuity read from the FULL features,
            # including any block the recorded dataset drops
            perceived = float(np.clip(gt.acuity_vector @ features, 0.0, 1.0))
            target = gt.confound * perceived * (N_DOSE_LEVELS - 1)
            dose = int(rng.choice(N_DOSE_LEVELS, p=_dose_weights(target, gt.behavior_temperature)[0]))
            # uniform draw in (lo, hi]: stays inside the intended grid bin
            flo, fhi = gt.dose_fluid_range[dose]
            vlo, vhi = gt.dose_vis_range[dose]
            fluid_ml = fhi - (fhi - flo) * rng.random()
            vis = vhi - (vhi - vlo) * rng.random()
            nxt = int(rng.choice(gt.n_latent + 2, p=gt.kernel[l, dose]))
            terminal = Terminal.NONE
            if nxt == gt.discharge:
                terminal = Terminal.DISCHARGE
            elif nxt == gt.death:
                terminal = Terminal.DEATH
            elif step == config.max_steps - 1:
                # cap semantics: force-terminate by current severity
                terminal = Terminal.DEATH if l % n_sev == n_sev - 1 else Terminal.DISCHARGE
            transitions.append(
                Transition(
                    patient_id=pid,
                    step_index=step,
                    features=features[keep],
                    fluid_ml=float(fluid_ml),
                    vis=float(vis),
                    clinical_label=gt.labels[l],
                    terminal=terminal,
                )
            )
            truth.append((pid, step, l))
            if terminal is not Terminal.NONE:
                break
            l = nxt
        episodes.append(Episode(patient_id=pid, transitions=tuple(transitions)))
    return SimulatedCohort(dataset=make_dataset(episodes), truth=truth)


def write_truth_csv(cohort: SimulatedCohort, stream) -> None:
    stream.write("patient_id,step_index,latent_state\n")
    for pid, step, latent in sorted(cohort.truth):
        stream.write(f"{pid},{step},{latent}\n")


# --- exact oracle over the true chain ------------------------------------------


@dataclass(frozen=True, eq=False)
class OracleSolution:
    q: np.ndarray  # (6, 4) true optimal action values
    optimal_dose: np.ndarray  # argmax dose level per latent state
    v: np.ndarray  # (6,) optimal state values
    gamma: float


def oracle_solution(gt: GroundTruthMdp, gamma: float = 0.99, tol: float = 1e-14) -> OracleSolution:
    """Dense value iteration on the true kernel to a 1e-14 residual."""
    n = gt.n_latent
    reward = gt.kernel[:, :, gt.discharge] - gt.kernel[:, :, gt.death]
    p_live = gt.kernel[:, :, :n]
    v = np.zeros(n)
    for _ in range(10_000_000):
        q = reward + gamma * (p_live @ v)
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            break
        v = v_new
    q = reward + gamma * (p_live @ v)
    return OracleSolution(q=q, optimal_dose=np.argmax(q, axis=1), v=q.max(axis=1), gamma=gamma)


def oracle_policy_value(gt: GroundTruthMdp, policy: np.ndarray, gamma: float = 0.99) -> float:
    """Exact value of a latent-state policy via the linear Bellman solve,
    averaged over the true start distribution."""
    n = gt.n_latent
    p_pi = np.einsum("la,lak->lk", policy, gt.kernel)
    r_pi = p_pi[:, gt.discharge] - p_pi[:, gt.death]
    v = np.linalg.solve(np.eye(n) - gamma * p_pi[:, :n], r_pi)
    return float(gt.start @ v)


def oracle_absorption(gt: GroundTruthMdp, policy: np.ndarray) -> np.ndarray:
    """Exact death probability per latent state under a policy (linear solve)."""
    n = gt.n_latent
    p_pi = np.einsum("la,lak->lk", policy, gt.kernel)
    return np.linalg.solve(np.eye(n) - p_pi[:, :n], p_pi[:, gt.death])
