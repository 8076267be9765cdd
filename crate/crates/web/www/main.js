// Built by the commands in the README: cargo build for wasm32, then wasm-bindgen --target web into ./pkg.
import init, { Demo } from "./pkg/facl_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
let demo = null;

function status(text) {
  $("status").textContent = text;
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      status(`Error: ${e.message ?? e}`);
    }
  };
}

function build() {
  status("Generating corpus...");
  demo?.free();
  demo = new Demo(num("users"), num("items"), num("zipf"), num("seed"));
  status(`Corpus ready: ${demo.numUsers()} training users.`);
  drawCurve();
}

function drawCurve() {
  const gamma = num("gamma");
  $("gammaValue").textContent = gamma.toFixed(2);
  const points = JSON.parse(demo.rhoCurve(gamma, num("cap"), 161));
  const c = $("curve").getContext("2d");
  const [w, h, pad] = [c.canvas.width, c.canvas.height, 30];
  const x = (r) => pad + (r / 4) * (w - 2 * pad);
  const y = (p) => h - pad - p * (h - 2 * pad);
  c.clearRect(0, 0, w, h);
  c.strokeStyle = "#999";
  c.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  c.fillStyle = "#666";
  for (const r of [0, 1, 2, 3, 4]) c.fillText(String(r), x(r) - 3, h - pad + 14);
  for (const p of [0, 0.5, 1]) c.fillText(p.toFixed(1), 4, y(p) + 4);
  c.lineWidth = 2;
  c.setLineDash([6, 4]);
  c.strokeStyle = "#aaa";
  c.beginPath();
  c.moveTo(x(0), y(gamma));
  c.lineTo(x(4), y(gamma));
  c.stroke();
  c.setLineDash([]);
  c.strokeStyle = "#1f6feb";
  c.beginPath();
  points.forEach((p, i) => (i ? c.lineTo(x(p.ratio), y(p.adaptive)) : c.moveTo(x(p.ratio), y(p.adaptive))));
  c.stroke();
}

function runAudit() {
  const rows = JSON.parse(demo.audit(num("gamma"), num("trials"), 11));
  const fmt = (v) => v.toFixed(4);
  $("audit").innerHTML =
    "<table><tr><th>tercile</th><th>occurrences</th><th>uniform</th><th>adaptive</th><th>adaptive expected</th></tr>" +
    rows
      .map((r) => `<tr><td>${r.bin}</td><td>${r.occurrences}</td><td>${fmt(r.uniform)}</td><td>${fmt(r.adaptive)}</td><td>${fmt(r.adaptive_expected)}</td></tr>`)
      .join("") +
    "</table>";
}

function runViews() {
  const v = JSON.parse(demo.views(num("user"), num("gamma"), num("eta"), $("policy").value, num("viewSeed")));
  const chip = (item) => {
    const shade = Math.round(255 - 160 * item.rho);
    return `<span class="item" title="count ${item.count}, rho ${item.rho.toFixed(3)}" style="background: rgb(255, ${shade}, ${shade})">${item.id}</span>`;
  };
  const plain = (ids) => ids.map((id) => `<span class="item" style="background:#eef">${id}</span>`).join("");
  $("views").innerHTML =
    `<p>User ${v.user}; red intensity shows ρ.</p><p>${v.original.map(chip).join("")}</p>` +
    v.views.map((ids, k) => `<p>view ${k + 1}: ${v.operators[k]}<br>${plain(ids)}</p>`).join("");
}

await init();
$("build").onclick = guarded(build);
$("gamma").oninput = guarded(drawCurve);
$("cap").onchange = guarded(drawCurve);
$("runAudit").onclick = guarded(runAudit);
$("runViews").onclick = guarded(runViews);
guarded(build)();
