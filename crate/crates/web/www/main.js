import init, { binary_channel, snr_matrix, switching } from "./pkg/lingagg_web.js";

const num = (id) => Number(document.getElementById(id).value);
const fmt = (x) => (x === null ? "" : x.toFixed(3));

// Yields to the browser so the "running" text paints before the blocking call.
async function run(out, f) {
  out.className = "busy";
  out.textContent = "running...";
  await new Promise((r) => setTimeout(r, 20));
  try {
    const result = JSON.parse(f());
    out.className = "";
    return result;
  } catch (e) {
    out.className = "";
    out.textContent = `error: ${e.message ?? e}`;
    return null;
  }
}

document.getElementById("bc-run").onclick = async () => {
  const out = document.getElementById("bc-out");
  const r = await run(out, () => binary_channel(num("bc-p"), num("bc-n"), num("bc-seed")));
  if (!r) return;
  out.textContent =
    `closed form ln2 - H_b(p)  ${r.closed_form_nats.toFixed(6)} nats\n` +
    `probe bound               ${r.bound_nats.toFixed(6)} nats\n` +
    `H(Y) ${r.h_y_nats.toFixed(4)}   CE ${r.ce_nats.toFixed(4)}`;
};

document.getElementById("snr-run").onclick = async () => {
  const out = document.getElementById("snr-out");
  const r = await run(out, () => snr_matrix(num("snr-layers"), num("snr-peak"), num("snr-n"), num("snr-seed")));
  if (!r) return;
  const max = Math.max(...r.bounds_nats.flat().filter((x) => x !== null), 1e-9);
  const head = `<tr><th>layer \\ dB</th>${r.snr_db.map((s) => `<th>${s}</th>`).join("")}</tr>`;
  const rows = r.bounds_nats
    .map((row, l) => {
      const cells = row
        .map((x) => {
          const shade = x === null ? 255 : Math.round(255 - 155 * Math.max(0, x) / max);
          return `<td style="background: rgb(${shade},${shade},255)">${fmt(x)}</td>`;
        })
        .join("");
      return `<tr><th>${l}${l === r.peak ? " *" : ""}</th>${cells}</tr>`;
    })
    .join("");
  out.innerHTML = `<table>${head}${rows}</table><p>* planted peak layer</p>`;
};

document.getElementById("sw-run").onclick = async () => {
  const out = document.getElementById("sw-out");
  const r = await run(out, () => switching(num("sw-n"), num("sw-seed")));
  if (!r) return;
  out.textContent =
    `WS bound  ${r.ws_bound_nats.toFixed(4)} nats   weights [${r.ws_weights.map((w) => w.toFixed(3)).join(", ")}]\n` +
    `DWS bound ${r.dws_bound_nats.toFixed(4)} nats`;
  draw(r.frame_weights, r.active_layer);
};

function draw(weights, active) {
  const c = document.getElementById("sw-canvas");
  const g = c.getContext("2d");
  const layers = weights[0].length;
  const w = c.width / weights.length;
  const band = (c.height - 20) / layers;
  g.clearRect(0, 0, c.width, c.height);
  weights.forEach((frame, i) => {
    frame.forEach((x, l) => {
      const v = Math.round(255 * (1 - x));
      g.fillStyle = `rgb(${v},${v},${v})`;
      g.fillRect(i * w, l * band, Math.ceil(w), band);
    });
    g.fillStyle = `hsl(${(360 * active[i]) / layers}, 70%, 50%)`;
    g.fillRect(i * w, c.height - 14, Math.ceil(w), 14);
  });
}

init();
