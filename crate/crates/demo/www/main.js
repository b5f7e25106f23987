import init, { scheduler_curves, discrete_trajectories, gaussian_trajectories } from "./pkg/cgfm_demo.js";

const PATHS = 2000;
const DRAWN = 150;
const SEED = 7n;

const $ = (id) => document.getElementById(id);

function frame(canvas, xRange, yRange) {
  const ctx = canvas.getContext("2d");
  const pad = 36;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const sx = (x) => pad + ((x - xRange[0]) / (xRange[1] - xRange[0])) * w;
  const sy = (y) => pad + h - ((y - yRange[0]) / (yRange[1] - yRange[0])) * h;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(xRange[0].toFixed(1), pad, pad + h + 14);
  ctx.fillText(xRange[1].toFixed(1), pad + w - 14, pad + h + 14);
  ctx.fillText(yRange[1].toFixed(1), 4, pad + 4);
  ctx.fillText(yRange[0].toFixed(1), 4, pad + h);
  return { ctx, sx, sy };
}

function line(f, xs, ys, color, width = 1) {
  f.ctx.strokeStyle = color;
  f.ctx.lineWidth = width;
  f.ctx.beginPath();
  xs.forEach((x, i) => (i ? f.ctx.lineTo(f.sx(x), f.sy(ys[i])) : f.ctx.moveTo(f.sx(x), f.sy(ys[i]))));
  f.ctx.stroke();
}

function report(id, text, isError = false) {
  $(id).textContent = text;
  $(id).className = isError ? "out err" : "out";
}

// Column `c` of a `rows x cols` row-major array.
const column = (data, cols, c) => Array.from({ length: data.length / cols }, (_, i) => data[i * cols + c]);

// Path `p` of a `(steps + 1) x paths` step-major array.
const path = (data, paths, p) => Array.from({ length: data.length / paths }, (_, i) => data[i * paths + p]);

function drawScheduler() {
  const spec = $("sched-text").value.trim() || $("sched").value;
  let rows;
  try {
    rows = scheduler_curves(spec, 201);
  } catch (e) {
    report("sched-out", String(e.message ?? e), true);
    return;
  }
  const t = column(rows, 5, 0);
  const series = [["alpha", 1, "#1f77b4"], ["beta", 2, "#d62728"]];
  if ($("sched-deriv").checked) series.push(["alpha'", 3, "#6baed6"], ["beta'", 4, "#fc9272"]);
  const all = series.flatMap(([, c]) => column(rows, 5, c)).filter(Number.isFinite);
  const lo = Math.min(0, ...all);
  const hi = Math.max(1, ...all.map((v) => Math.min(v, 10)));
  const f = frame($("sched-plot"), [0, 1], [lo, hi]);
  for (const [, c, color] of series) line(f, t, column(rows, 5, c).map((v) => Math.max(lo, Math.min(hi, v))), color, 2);
  report("sched-out", series.map(([name, , color]) => `${name} (${color})`).join("   "));
}

function drawDiscrete() {
  const sigma = Number($("disc-sigma").value);
  const w = Number($("disc-w").value);
  const steps = Number($("disc-steps").value);
  let data;
  try {
    data = discrete_trajectories("condot", sigma, w, steps, PATHS, SEED);
  } catch (e) {
    report("disc-out", String(e.message ?? e), true);
    return;
  }
  const t = Array.from({ length: steps + 1 }, (_, i) => i / steps);
  const f = frame($("disc-plot"), [0, 1], [-3, 3]);
  for (let p = 0; p < DRAWN; p++) {
    const xs = path(data, PATHS, p);
    line(f, t, xs, xs[steps] > 0 ? "rgba(31,119,180,.35)" : "rgba(214,39,40,.35)");
  }
  const last = data.subarray(steps * PATHS);
  const right = last.filter((x) => x > 0).length / PATHS;
  report("disc-out", `share ending near +2: ${right.toFixed(3)}   weight: ${w.toFixed(2)}`);
}

function stats(xs) {
  const m = xs.reduce((a, b) => a + b, 0) / xs.length;
  const v = xs.reduce((a, b) => a + (b - m) ** 2, 0) / xs.length;
  return [m, Math.sqrt(v)];
}

function drawGaussian() {
  const target = $("gauss-target").value;
  const steps = Number($("gauss-steps").value);
  let data, ref;
  try {
    data = gaussian_trajectories(target, steps, PATHS, SEED);
    ref = gaussian_trajectories("u", steps, PATHS, SEED);
  } catch (e) {
    report("gauss-out", String(e.message ?? e), true);
    return;
  }
  const t = Array.from({ length: steps + 1 }, (_, i) => i / steps);
  const f = frame($("gauss-plot"), [0, 1], [-4, 7]);
  for (let p = 0; p < DRAWN; p++) line(f, t, path(data, PATHS, p), "rgba(31,119,180,.3)");
  const last = data.subarray(steps * PATHS);
  const [m, s] = stats(last);
  let gap = 0;
  for (let i = 0; i < data.length; i++) gap = Math.max(gap, Math.abs(data[i] - ref[i]));
  report("gauss-out", `terminal mean ${m.toFixed(4)}  std ${s.toFixed(4)}   max gap to u sampler ${gap.toExponential(2)}`);
}

await init();
for (const id of ["sched", "sched-text", "sched-deriv"]) $(id).addEventListener("input", drawScheduler);
for (const id of ["disc-sigma", "disc-w", "disc-steps"]) $(id).addEventListener("change", drawDiscrete);
for (const id of ["gauss-target", "gauss-steps"]) $(id).addEventListener("change", drawGaussian);
drawScheduler();
drawDiscrete();
drawGaussian();
