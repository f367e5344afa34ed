import os
import base64
import json

import structlog
from quart import Quart, request, jsonify
from quart_cors import cors

from dotenv import load_dotenv
load_dotenv()

from utils.run_logging import (
    CONTROLLER_FILE,
    EVENTS_FILE,
    METRIC_FIELDS,
    METRICS_FILE,
    read_json_lines,
    rows_to_csv,
)

log = structlog.get_logger(__name__)

app = Quart(__name__)
app = cors(app, allow_origin="*")

# Global references
runs_dir: str = os.getenv("AUTOGAN_RUNS_DIR", "runs")


def _run_path(run: str) -> str | None:
    """Resolve a run name inside the runs directory; None if it escapes it or does not exist."""
    root = os.path.realpath(runs_dir)
    path = os.path.realpath(os.path.join(root, run))
    if os.path.dirname(path) != root or not os.path.isdir(path):
        return None
    return path


@app.before_serving
async def startup():
    """
    Called once when the server starts (before handling requests).
    """
    global runs_dir
    runs_dir = os.getenv("AUTOGAN_RUNS_DIR", runs_dir)
    log.info("[startup] serving run directories", runs_dir=os.path.abspath(runs_dir))


@app.route('/health', methods=['GET'])
def health():
    return jsonify({'status': 'healthy'}), 200


@app.route("/runs", methods=["GET"])
async def list_runs():
    """
    Every run directory with its finished flag and best archived reward.
    """
    if not os.path.isdir(runs_dir):
        return jsonify({"runs": []}), 200
    runs = []
    for name in sorted(os.listdir(runs_dir)):
        path = _run_path(name)
        if path is None:
            continue
        archive_path = os.path.join(path, "archive.json")
        best = None
        if os.path.exists(archive_path):
            with open(archive_path, "r", encoding="utf-8") as f:
                archive = json.load(f)
            if archive:
                last_stage = max(archive, key=int)
                best = archive[last_stage][0]["reward"]
        runs.append({"run": name, "finished": os.path.exists(archive_path), "best_reward": best})
    return jsonify({"runs": runs}), 200


@app.route("/runs/<run>/archive", methods=["GET"])
async def get_archive(run: str):
    path = _run_path(run)
    archive_path = os.path.join(path, "archive.json") if path else None
    if not archive_path or not os.path.exists(archive_path):
        return jsonify({"error": f"no archive for run '{run}'"}), 404
    with open(archive_path, "r", encoding="utf-8") as f:
        archive = json.load(f)
    # traces carry hidden vectors; the view only needs genotypes and rewards
    view = {
        stage: [{"genotype": e["genotype"], "tokens": e["tokens"], "reward": e["reward"], "index": e["index"]}
                for e in entries]
        for stage, entries in archive.items()
    }
    return jsonify({"run": run, "stages": view}), 200


@app.route("/runs/<run>/events", methods=["GET"])
async def get_events(run: str):
    """
    Query params:
      kind=events|controller (default events)
      event=<name> to keep only one event type
    """
    path = _run_path(run)
    if path is None:
        return jsonify({"error": f"unknown run '{run}'"}), 404
    kind = request.args.get("kind", "events")
    if kind not in ("events", "controller"):
        return jsonify({"error": "kind must be 'events' or 'controller'"}), 400
    rows = read_json_lines(os.path.join(path, EVENTS_FILE if kind == "events" else CONTROLLER_FILE))
    event = request.args.get("event")
    if event:
        rows = [r for r in rows if r.get("event") == event]
    return jsonify({"run": run, "rows": rows}), 200


@app.route("/runs/<run>/metrics", methods=["GET"])
async def get_metrics(run: str):
    """
    Metric reports as JSON (default) or CSV (?format=csv).
    """
    path = _run_path(run)
    if path is None:
        return jsonify({"error": f"unknown run '{run}'"}), 404
    output_format = request.args.get("format", "json")
    if output_format not in ("json", "csv"):
        return jsonify({"error": "Invalid format. Must be 'json' or 'csv'."}), 400
    rows = read_json_lines(os.path.join(path, METRICS_FILE))
    if output_format == "csv":
        return rows_to_csv(rows, METRIC_FIELDS), 200, {"Content-Type": "text/csv"}
    return jsonify({"run": run, "rows": rows}), 200


@app.route("/runs/<run>/samples/<name>", methods=["GET"])
async def get_samples(run: str, name: str):
    """
    A sample grid as base64-encoded PPM.
    """
    path = _run_path(run)
    if path is None:
        return jsonify({"error": f"unknown run '{run}'"}), 404
    sample_dir = os.path.join(path, "samples")
    filename = name if name.endswith(".ppm") else f"{name}.ppm"
    sample_path = os.path.join(sample_dir, filename)
    if os.path.dirname(os.path.realpath(sample_path)) != os.path.realpath(sample_dir) or not os.path.exists(sample_path):
        return jsonify({"error": f"no sample '{name}' in run '{run}'"}), 404
    with open(sample_path, "rb") as f:
        data = f.read()
    return jsonify({"run": run, "name": filename, "format": "ppm",
                    "image_base64": base64.b64encode(data).decode("ascii")}), 200


# For local runs
if __name__ == "__main__":
    app.run(debug=True, port=int(os.getenv("PORT", 8080)))
