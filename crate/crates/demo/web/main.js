import init, { builtin, partition, scaling, simulate_timeline } from "./pkg/hpipe_demo.js";

const COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const $ = (id) => document.getElementById(id);

function guard(fn) {
  try {
    $("error").textContent = "";
    fn();
  } catch (e) {
    $("error").textContent = String(e.message ?? e);
  }
}

function clear(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.font = "12px system-ui";
  return ctx;
}

function layoutTree(stages) {
  const children = new Map(stages.map((s) => [s.id, []]));
  for (const s of stages) if (s.parent !== null) children.get(s.parent).push(s.id);
  const pos = new Map();
  let nextLeaf = 0;
  let depth = 0;
  const visit = (id, d) => {
    depth = Math.max(depth, d);
    const kids = children.get(id);
    if (kids.length === 0) {
      pos.set(id, { x: nextLeaf++, y: d });
    } else {
      kids.forEach((k) => visit(k, d + 1));
      const xs = kids.map((k) => pos.get(k).x);
      pos.set(id, { x: (Math.min(...xs) + Math.max(...xs)) / 2, y: d });
    }
  };
  visit(0, 0);
  return { pos, leaves: nextLeaf, depth };
}

function drawPartition() {
  const frames = Number($("p-frames").value);
  const view = JSON.parse(partition($("hierarchy").value, Number($("p-devices").value), frames));
  const canvas = $("tree");
  const ctx = clear(canvas);
  const { pos, leaves, depth } = layoutTree(view.stages);
  const px = (p) => ({
    x: 40 + (p.x + 0.5) * ((canvas.width - 80) / Math.max(leaves, 1)),
    y: 30 + p.y * ((canvas.height - 60) / Math.max(depth, 1)),
  });
  const byId = new Map(view.stages.map((s) => [s.id, s]));
  for (const s of view.stages) {
    if (s.parent === null) continue;
    const a = px(pos.get(s.parent));
    const b = px(pos.get(s.id));
    const cut = byId.get(s.parent).device !== s.device;
    ctx.strokeStyle = cut ? "#d00" : "#999";
    ctx.setLineDash(cut ? [6, 4] : []);
    ctx.lineWidth = cut ? 2 : 1;
    ctx.beginPath();
    ctx.moveTo(a.x, a.y);
    ctx.lineTo(b.x, b.y);
    ctx.stroke();
  }
  ctx.setLineDash([]);
  for (const s of view.stages) {
    const p = px(pos.get(s.id));
    ctx.fillStyle = COLORS[s.device % COLORS.length];
    ctx.beginPath();
    ctx.arc(p.x, p.y, 14, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillStyle = "#fff";
    ctx.textAlign = "center";
    ctx.fillText(String(s.id), p.x, p.y + 4);
    ctx.fillStyle = "#444";
    ctx.fillText(`${(s.latency_s * 1e3).toFixed(1)} ms · R ${s.rate.toFixed(2)}`, p.x, p.y + 28);
  }
  const e = view.eval;
  $("p-summary").innerHTML =
    `devices: ${view.devices.map((g, j) => `<b style="color:${COLORS[j % COLORS.length]}">[${g.join(" ")}]</b>`).join(" ")}` +
    ` · loads ${e.loads_s.map((l) => (l * 1e3).toFixed(2)).join(" / ")} ms` +
    ` · comm ${(e.comm_s * 1e3).toFixed(2)} ms · imbalance ${e.imbalance.toFixed(2)}` +
    ` · <b>${e.throughput_fps.toFixed(2)} fps</b> (${view.method}, cut edges dashed)`;
}

function drawScaling() {
  const rows = JSON.parse(scaling($("hierarchy").value, Number($("s-devices").value), Number($("s-frames").value), 0n));
  const canvas = $("scaling");
  const ctx = clear(canvas);
  const maxY = Math.max(...rows.flatMap((r) => [r.model_fps, r.sim_fps])) * 1.1;
  const x = (n) => 60 + ((n - 1) / Math.max(rows.length - 1, 1)) * (canvas.width - 100);
  const y = (v) => canvas.height - 30 - (v / maxY) * (canvas.height - 50);
  ctx.strokeStyle = "#ccc";
  ctx.fillStyle = "#444";
  ctx.textAlign = "right";
  for (let i = 0; i <= 4; i++) {
    const v = (maxY * i) / 4;
    ctx.beginPath();
    ctx.moveTo(55, y(v));
    ctx.lineTo(canvas.width - 30, y(v));
    ctx.stroke();
    ctx.fillText(`${v.toFixed(1)} fps`, 52, y(v) + 4);
  }
  ctx.textAlign = "center";
  rows.forEach((r) => ctx.fillText(`N=${r.devices}`, x(r.devices), canvas.height - 10));
  for (const [key, color] of [["model_fps", COLORS[0]], ["sim_fps", COLORS[1]]]) {
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    rows.forEach((r, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, x(r.devices), y(r[key])));
    ctx.stroke();
    rows.forEach((r) => ctx.fillRect(x(r.devices) - 3, y(r[key]) - 3, 6, 6));
  }
  $("s-table").innerHTML =
    "<tr><th>N</th><th>used</th><th>model fps</th><th>sim fps</th><th>speedup</th></tr>" +
    rows
      .map((r) => `<tr><td>${r.devices}</td><td>${r.devices_used}</td><td>${r.model_fps.toFixed(2)}</td><td>${r.sim_fps.toFixed(2)}</td><td>${r.speedup.toFixed(2)}x</td></tr>`)
      .join("");
}

function drawTimeline() {
  const devices = Number($("t-devices").value);
  const t = JSON.parse(
    simulate_timeline(
      $("hierarchy").value,
      devices,
      Number($("t-frames").value),
      BigInt($("t-seed").value),
      $("t-overlap").checked,
      Number($("t-shown").value),
    ),
  );
  const canvas = $("timeline");
  const ctx = clear(canvas);
  const end = Math.max(...t.spans.map((s) => s.end_s), 1e-9);
  const lanes = t.report.device_busy_s.length;
  const laneH = (canvas.height - 30) / Math.max(lanes, 1);
  const x = (s) => 70 + (s / end) * (canvas.width - 90);
  ctx.fillStyle = "#444";
  for (let d = 0; d < lanes; d++) ctx.fillText(`device ${d}`, 5, 10 + d * laneH + laneH / 2);
  for (const s of t.spans) {
    const top = 10 + s.device * laneH + (s.send ? laneH * 0.65 : 0);
    const h = s.send ? laneH * 0.25 : laneH * 0.6;
    ctx.fillStyle = s.send ? "#bbb" : COLORS[s.frame % COLORS.length];
    ctx.fillRect(x(s.start_s), top, Math.max(x(s.end_s) - x(s.start_s), 1), h);
    if (!s.send && x(s.end_s) - x(s.start_s) > 16) {
      ctx.fillStyle = "#fff";
      ctx.fillText(`${s.frame}:${s.stage}`, x(s.start_s) + 2, top + h / 2 + 4);
    }
  }
  ctx.fillStyle = "#444";
  ctx.fillText(`${(end * 1e3).toFixed(1)} ms`, canvas.width - 60, canvas.height - 5);
  const r = t.report;
  $("t-summary").textContent =
    `${r.frames_completed} frames in ${r.total_time_s.toFixed(3)} s: simulated ${r.throughput_fps.toFixed(2)} fps, ` +
    `model ${t.model_fps.toFixed(2)} fps; utilization ${r.device_utilization.map((u) => u.toFixed(2)).join(" / ")}; ` +
    `latency p50 ${(r.latency.p50_s * 1e3).toFixed(1)} ms. Bars are frame:stage, grey strips are transfers.`;
}

function refresh() {
  guard(drawPartition);
  guard(drawScaling);
  guard(drawTimeline);
}

await init();
const load = () => {
  $("hierarchy").value = builtin($("builtin").value);
  refresh();
};
$("builtin").addEventListener("change", load);
$("hierarchy").addEventListener("change", refresh);
$("p-devices").addEventListener("input", () => {
  $("p-devices-out").textContent = $("p-devices").value;
  guard(drawPartition);
});
$("p-frames").addEventListener("change", () => guard(drawPartition));
$("s-run").addEventListener("click", () => guard(drawScaling));
$("t-run").addEventListener("click", () => guard(drawTimeline));
load();
