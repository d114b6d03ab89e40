import init, { compare_estimators, continuity_curve, additivity } from "./pkg/scatterlab_wasm_demo.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const LAPLACE = { kind: "product", marginals: [
  { kind: "laplace", scale: Math.SQRT1_2 }, { kind: "laplace", scale: Math.SQRT1_2 }] };

const FUNCTIONALS = {
  cov: { family: "cov" },
  cov4: { family: "cov4" },
  t3: { family: "m_scatter", weight: { kind: "student_t", nu: 3 } },
  tyler: { family: "tyler_shape" },
  mcd: { family: "mcd", alpha: 0.75, starts: 10, seed: 1 },
};

const DISTRIBUTIONS = {
  laplace: LAPLACE,
  exp: { kind: "product", marginals: [
    { kind: "centered_exponential", rate: 1 }, { kind: "uniform", halfwidth: 1.7320508075688772 }] },
  t: { kind: "elliptical", sigma: [[1, 0.8], [0.8, 1]], radial: { kind: "student_t", df: 3 } },
  ball: { kind: "elliptical", sigma: [[4, 0], [0, 1]], radial: { kind: "uniform_ball" } },
};

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(fn, request) {
  return JSON.parse(fn(JSON.stringify(request)));
}

function ellipse(ctx, m, cx, cy, scale, color, dashed) {
  const [[a, b], [, d]] = m;
  const tr = (a + d) / 2, det = Math.sqrt(((a - d) / 2) ** 2 + b * b);
  const l1 = tr + det, l2 = Math.max(tr - det, 0);
  const angle = Math.abs(b) < 1e-15 ? (a >= d ? 0 : Math.PI / 2) : Math.atan2(l1 - a, b);
  ctx.save();
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.setLineDash(dashed ? [6, 4] : []);
  ctx.beginPath();
  ctx.ellipse(cx, cy, scale * Math.sqrt(l1), scale * Math.sqrt(l2), -angle, 0, 2 * Math.PI);
  ctx.stroke();
  ctx.restore();
}

function drawComparison() {
  const canvas = $("cmp-canvas"), ctx = canvas.getContext("2d");
  const out = call(compare_estimators, {
    distribution: DISTRIBUTIONS[$("cmp-dist").value],
    n: num("cmp-n"),
    seed: num("cmp-seed"),
    functionals: [FUNCTIONALS.cov, FUNCTIONALS.cov4, FUNCTIONALS.t3, FUNCTIONALS.tyler, FUNCTIONALS.mcd],
  });
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const scale = canvas.width / 16, cx = canvas.width / 2, cy = canvas.height / 2;
  const mean = [0, 1].map((j) => out.points.reduce((s, r) => s + r[j], 0) / out.points.length);
  ctx.fillStyle = "rgba(0,0,0,0.25)";
  for (const [x, y] of out.points) ctx.fillRect(cx + scale * x - 1, cy - scale * y - 1, 2, 2);
  const mx = cx + scale * mean[0], my = cy - scale * mean[1];
  if (out.truth) ellipse(ctx, out.truth, mx, my, scale, "#000", true);
  $("cmp-legend").innerHTML = "";
  out.estimates.forEach((e, i) => {
    const span = document.createElement("span");
    span.style.color = COLORS[i];
    span.textContent = e.error ? `${e.label}: ${e.error}` : e.label;
    $("cmp-legend").append(span);
    if (e.matrix) ellipse(ctx, e.matrix, mx, my, scale, COLORS[i], false);
  });
}

function drawContinuity() {
  const canvas = $("cont-canvas"), ctx = canvas.getContext("2d");
  const grid = [1, 2, 4, 8, 16, 32, 64, 128];
  const out = call(continuity_curve, {
    functional: FUNCTIONALS[$("cont-func").value],
    distribution: LAPLACE, n_grid: grid, m: num("cont-m"), replicates: 1, seed: 7,
  });
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 40, w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  const top = Math.max(...out.curve.map((c) => c.error), 0.05);
  const px = (n) => pad + (w * Math.log2(n)) / Math.log2(grid[grid.length - 1]);
  const py = (e) => pad + h - (h * e) / top;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#222";
  ctx.fillText(top.toFixed(3), 4, pad + 4);
  ctx.fillText("0", 4, pad + h);
  for (const n of grid) ctx.fillText(String(n), px(n) - 4, pad + h + 16);
  ctx.strokeStyle = COLORS[0];
  ctx.lineWidth = 2;
  ctx.beginPath();
  out.curve.forEach((c, i) => (i ? ctx.lineTo(px(c.n), py(c.error)) : ctx.moveTo(px(c.n), py(c.error))));
  ctx.stroke();
  for (const c of out.curve) ctx.fillRect(px(c.n) - 3, py(c.error) - 3, 6, 6);
}

function runAdditivity() {
  const right = { kind: "affine", A: [[2, 0], [0, 1]], b: [0, 0],
    inner: { kind: "product", marginals: [{ kind: "standard_normal" }, { kind: "standard_normal" }] } };
  const out = call(additivity, {
    functional: FUNCTIONALS[$("add-func").value], left: LAPLACE, right,
    n: num("add-n"), replicates: 3, seed: 11, threshold: 0.08,
  });
  $("add-out").textContent =
    `${out.label}: max ‖S(x+y) − S(x) − S(y)‖ = ${out.statistic?.toFixed(4)} ` +
    `(threshold ${out.threshold}, ${out.pass ? "additive" : "not additive"})`;
}

function guarded(fn) {
  return () => {
    try { fn(); } catch (e) { alert(e); }
  };
}

await init();
$("cmp-run").onclick = guarded(drawComparison);
$("cont-run").onclick = guarded(drawContinuity);
$("add-run").onclick = guarded(runAdditivity);
guarded(drawComparison)();
