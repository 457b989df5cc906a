import init, { TwoStateModel } from "./pkg/brwre_wasm.js";

const form = document.getElementById("model");
const status = document.getElementById("status");
const summary = document.getElementById("summary");
const canvas = document.getElementById("plot");
const ctx = canvas.getContext("2d");

function value(name) {
  return Number(form.elements[name].value);
}

function model() {
  return new TwoStateModel(
    value("p"),
    value("ka"), value("ma"), value("va"),
    value("kb"), value("mb"), value("vb"),
  );
}

// Draws line series (or bars when `bars` is set) sharing one pair of axes.
function plot(series, { bars = false, xLabel = "", yLabel = "" } = {}) {
  const pad = 40;
  const xs = series.flatMap((s) => s.x);
  const ys = series.flatMap((s) => s.y).filter(Number.isFinite);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(0, ...ys), Math.max(...ys)];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 2 * pad);
  const py = (y) => canvas.height - pad - ((y - y0) / (y1 - y0 || 1)) * (canvas.height - 2 * pad);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad, canvas.width - 2 * pad, canvas.height - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.fillText(`${x0.toFixed(2)}`, pad, canvas.height - pad + 14);
  ctx.fillText(`${x1.toFixed(2)}`, canvas.width - pad - 30, canvas.height - pad + 14);
  ctx.fillText(`${y1.toFixed(3)}`, 2, pad + 4);
  ctx.fillText(`${y0.toFixed(3)}`, 2, canvas.height - pad);
  ctx.fillText(xLabel, canvas.width / 2, canvas.height - 8);
  ctx.fillText(yLabel, pad, pad - 8);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.fillStyle = s.color;
    if (bars) {
      const w = (canvas.width - 2 * pad) / s.x.length;
      s.x.forEach((x, i) => ctx.fillRect(px(x), py(s.y[i]), Math.max(1, w - 1), py(y0) - py(s.y[i])));
      continue;
    }
    ctx.beginPath();
    s.x.forEach((x, i) => (i ? ctx.lineTo(px(x), py(s.y[i])) : ctx.moveTo(px(x), py(s.y[i]))));
    ctx.stroke();
  }
}

function run(action) {
  status.textContent = "";
  try {
    action(model());
  } catch (e) {
    status.textContent = String(e.message ?? e);
  }
}

function showRates(m) {
  const r = JSON.parse(m.rates(-3, 3, 301));
  plot(
    [
      { x: r.t, y: r.lambda, color: "#1f77b4" },
      { x: r.t, y: r.lambda_tilde, color: "#d62728" },
    ],
    { xLabel: "t", yLabel: "lambda (blue), free-energy limit (red)" },
  );
  const f = (v) => (v === null ? "none" : v.toFixed(6));
  summary.textContent =
    `t- = ${f(r.t_minus)}   t+ = ${f(r.t_plus)}\n` +
    `speeds: left ${f(r.speed_left)}, right ${f(r.speed_right)}`;
}

function showTree(m) {
  const t = JSON.parse(m.simulate(value("n"), value("seed")));
  const mids = t.histogram.map((_, i) => t.bin_edges[i]);
  plot([{ x: mids, y: t.histogram, color: "#2ca02c" }], { bars: true, xLabel: "position", yLabel: "fraction of particles" });
  const rows = t.generations.map(
    (g) => `${String(g.n).padStart(3)} ${String(g.count).padStart(9)} ${g.l_n.toFixed(3).padStart(9)} ${g.r_n.toFixed(3).padStart(9)} ${g.w_n.toFixed(4)}`,
  );
  summary.textContent = `environment ${t.environment}\n  n     count       L_n       R_n  W_n\n${rows.join("\n")}`;
}

function showClt(m) {
  const c = JSON.parse(m.clt(value("n"), value("seed")));
  plot(
    [
      { x: c.x, y: c.normal, color: "#999" },
      { x: c.x, y: c.empirical, color: "#9467bd" },
    ],
    { xLabel: "(x - a_n) / b_n", yLabel: "normalized CDF (purple) and Phi (grey)" },
  );
  summary.textContent = `n = ${c.n}, ${c.count} particles, a_n = ${c.a_n.toFixed(4)}, b_n = ${c.b_n.toFixed(4)}\nKS distance ${c.ks.toFixed(4)}`;
}

await init();
document.getElementById("rates").addEventListener("click", () => run(showRates));
document.getElementById("simulate").addEventListener("click", () => run(showTree));
document.getElementById("clt").addEventListener("click", () => run(showClt));
run(showRates);
