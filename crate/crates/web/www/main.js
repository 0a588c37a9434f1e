import init, { Scene, heat_rgba } from "./pkg/attnseg_web.js";

const $ = (id) => document.getElementById(id);

let scene = null;
let query = { x: 0, y: 0 };

function draw(canvas, rgba, n) {
  canvas.width = n;
  canvas.height = n;
  const img = new ImageData(new Uint8ClampedArray(rgba), n, n);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function fail(e) {
  $("error").textContent = String(e);
}

function rebuildScene() {
  $("error").textContent = "";
  try {
    if (scene) scene.free();
    scene = new Scene(Number($("seed").value), Number($("size").value), $("hard").checked);
  } catch (e) {
    scene = null;
    return fail(e);
  }
  const n = scene.size();
  query = { x: n >> 1, y: n >> 1 };
  $("labels").textContent = `${scene.instance_count()} instances\n\n` + scene.annotations_text();
  draw($("scene"), scene.image_rgba(), n);
  drawOverlay();
  drawGate();
  drawExplorer();
}

function drawOverlay() {
  if (!scene) return;
  draw($("overlay"), scene.overlay_rgba(Number($("alpha").value)), scene.size());
}

function drawGate() {
  if (!scene) return;
  const n = scene.size();
  const kind = $("gate").value;
  let values;
  try {
    values = scene.gate_map(kind, Number($("gate-seed").value), query.x, query.y);
  } catch (e) {
    return fail(e);
  }
  const rgba = scene.image_rgba();
  if (kind === "mhsa") {
    const i = 4 * (query.y * n + query.x);
    rgba.set([255, 0, 0, 255], i);
  }
  draw($("gate-scene"), rgba, n);
  draw($("gate-map"), heat_rgba(values), n);
  let lo = Infinity, hi = -Infinity, sum = 0;
  for (const v of values) {
    lo = Math.min(lo, v);
    hi = Math.max(hi, v);
    sum += v;
  }
  $("gate-info").textContent =
    (kind === "mhsa" ? `query (${query.x}, ${query.y})\n` : "") +
    `min  ${lo.toFixed(4)}\nmax  ${hi.toFixed(4)}\nmean ${(sum / values.length).toFixed(4)}`;
}

function drawExplorer() {
  if (!scene) return;
  const noise = Number($("noise").value);
  const tau = Number($("tau").value);
  const iou = Number($("iou").value);
  const seed = Number($("seed").value);
  $("explore-values").textContent = `noise ${noise.toFixed(2)}  τ ${tau.toFixed(2)}  IoU ${iou.toFixed(2)}`;
  let report;
  try {
    draw($("explore"), scene.explore_rgba(noise, tau, seed), scene.size());
    report = JSON.parse(scene.explore(noise, tau, iou, seed));
  } catch (e) {
    return fail(e);
  }
  const keys = ["tp", "fp", "fn", "precision", "recall", "f1", "ap50", "dataset_iou"];
  const fmt = (v) => (Number.isInteger(v) ? String(v) : v.toFixed(3));
  let html = `<tr><th></th><th>box</th><th>mask</th></tr>`;
  for (const k of keys) {
    html += `<tr><td>${k}</td><td>${fmt(report.box[k])}</td><td>${fmt(report.mask[k])}</td></tr>`;
  }
  html += `<tr><td>instances</td><td colspan="2">${report.instances}</td></tr>`;
  html += `<tr><td>pixel P / R</td><td colspan="2">${report.pixel_precision.toFixed(3)} / ${report.pixel_recall.toFixed(3)}</td></tr>`;
  $("metrics").innerHTML = html;
}

$("gate-scene").addEventListener("click", (ev) => {
  if (!scene) return;
  const n = scene.size();
  const r = ev.target.getBoundingClientRect();
  query.x = Math.min(n - 1, Math.floor(((ev.clientX - r.left) / r.width) * n));
  query.y = Math.min(n - 1, Math.floor(((ev.clientY - r.top) / r.height) * n));
  if ($("gate").value !== "mhsa") $("gate").value = "mhsa";
  drawGate();
});

for (const id of ["seed", "size", "hard"]) $(id).addEventListener("change", rebuildScene);
$("alpha").addEventListener("input", drawOverlay);
for (const id of ["gate", "gate-seed"]) $(id).addEventListener("change", drawGate);
for (const id of ["noise", "tau", "iou"]) $(id).addEventListener("input", drawExplorer);

init().then(rebuildScene, fail);
