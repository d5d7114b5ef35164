"""Record /v1 request/response fixtures for the browser client tests.

Trains a small model on a synthetic cohort, mounts the service in-process,
and captures the exact JSON bodies the client exchanges with it. Run from
the repository root after installing the Python package:

    python frontend/scripts/record_fixtures.py
"""

import json
import pathlib
import statistics
import tempfile

from fastapi.testclient import TestClient

import cmwm.model as mdl
import cmwm.objective as obj
import cmwm.service as svc
import cmwm.trainer as tr
from cmwm.data import save_cohort, split_patients
from cmwm.synthetic import SyntheticSpec, generate_synthetic_cohort

OUT_DIR = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# action 0 improves the outcome, action 1 worsens it
SPEC = SyntheticSpec(n_patients=30, min_periods=6, max_periods=9,
                     action_effects=(4.0, -4.0), adherence_effect=1.0,
                     noise_std=1.0, seed=33,
                     d_x=4, d_a_comm=3, d_tau=3, d_static_in=3)


def default_anchor() -> dict:
    return {"enabled": False, "weight": 1.0, "jump_cap": 5.0, "trend_window": 3}


def client_scenario(patient_id: str, n_periods: int, edits: list) -> dict:
    """Request body exactly as the browser client builds it."""
    return {
        "patient_id": patient_id,
        "context": max(3, n_periods // 2),
        "edits": edits,
        "anchor": default_anchor(),
    }


def train_state(root: pathlib.Path) -> svc.ServiceState:
    cohort, _ = generate_synthetic_cohort(SPEC)
    train, val, _ = split_patients(cohort, seed=5)
    cfg = mdl.ModelConfig(d_x=SPEC.d_x, d_a_struct=SPEC.d_a_struct,
                          d_a_comm=SPEC.d_a_comm, d_tau=SPEC.d_tau,
                          d_static_in=SPEC.d_static_in,
                          d_b=8, d_z=12, d_u=8, d_h=16, dropout=0.0, seed=4)
    tcfg = tr.TrainConfig(epochs=25, batch_size=64, seed=4)
    weights = obj.LossWeights(q_projections=16)
    res = tr.fit(cfg, train, val, tcfg, weights)

    checkpoint = root / "model.npz"
    cohort_path = root / "cohort.jsonl"
    mdl.save_checkpoint(checkpoint, res.params, res.standardizer.to_arrays(),
                        weights.to_dict(),
                        meta={"best_epoch": res.best_epoch,
                              "best_val_mae": res.best_metric})
    save_cohort(cohort_path, cohort)
    return svc.build_state(checkpoint, cohort_path)


def dump(name: str, payload) -> None:
    path = OUT_DIR / name
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {path}")


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        state = train_state(pathlib.Path(tmp))
    client = TestClient(svc.create_app(state))

    patients = client.get("/v1/patients").json()
    dump("patients.json", patients)

    eight = [p for p in patients["patients"] if p["n_periods"] == 8]
    assert eight, "fixture cohort must contain a patient with 8 periods"
    pid = eight[0]["patient_id"]
    n_periods = eight[0]["n_periods"]

    detail = client.get(f"/v1/patients/{pid}").json()
    assert len(detail["periods"]) == n_periods
    dump("patient_detail.json", detail)

    dump("model.json", client.get("/v1/model").json())

    context = max(3, n_periods // 2)
    future = list(range(context, n_periods))

    noedit_req = client_scenario(pid, n_periods, edits=[])
    noedit_resp = client.post("/v1/rollout", json=noedit_req)
    assert noedit_resp.status_code == 200
    noedit = noedit_resp.json()
    assert noedit["baseline"] == noedit["counterfactual"]
    assert all(d == 0.0 for d in noedit["difference"])
    dump("rollout_noedit.json", {"request": noedit_req, "response": noedit})

    positive_req = client_scenario(pid, n_periods, edits=[
        {"period": p, "set_actions": [0], "clear_actions": [1]} for p in future
    ])
    positive_resp = client.post("/v1/rollout", json=positive_req)
    assert positive_resp.status_code == 200
    positive = positive_resp.json()
    mean_shift = statistics.fmean(positive["difference"])
    assert mean_shift > 0.0, f"expected upward shift, got {mean_shift}"
    dump("rollout_positive.json", {"request": positive_req, "response": positive})

    missing = client.post("/v1/rollout", json=client_scenario("ghost", 8, []))
    assert missing.status_code == 404
    bad = client.post("/v1/rollout", json={
        "patient_id": pid, "context": n_periods + 3,
        "edits": [], "anchor": default_anchor()})
    assert bad.status_code == 400
    dump("errors.json", {
        "not_found": {"status": missing.status_code, "body": missing.json()},
        "bad_request": {"status": bad.status_code, "body": bad.json()},
    })

    print(f"patient {pid}: {n_periods} periods, context {context}, "
          f"mean positive shift {mean_shift:.3f}")


if __name__ == "__main__":
    main()
