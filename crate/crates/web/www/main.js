import init, {
  alphaBarCurve,
  classPrompts,
  noisedPose,
  partBlend,
  skeletonParents,
} from "./pkg/motion_diffusion_web.js";

const $ = (id) => document.getElementById(id);

function drawCurve() {
  const canvas = $("schedule-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let curve;
  try {
    curve = alphaBarCurve(Number($("steps").value), Number($("beta-start").value), Number($("beta-end").value));
    $("schedule-error").textContent = "";
  } catch (e) {
    $("schedule-error").textContent = e.message;
    return;
  }
  const pad = 30;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#333";
  ctx.fillText("1", 10, pad + 4);
  ctx.fillText("0", 10, pad + h + 4);
  ctx.fillText("t", pad + w / 2, canvas.height - 8);
  ctx.strokeStyle = "#1565c0";
  ctx.lineWidth = 2;
  ctx.beginPath();
  curve.forEach((a, t) => {
    const x = pad + (w * t) / (curve.length - 1);
    const y = pad + h * (1 - a);
    if (t === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

const parents = () => skeletonParents();

function drawFigure(canvas, pose, colorOf) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const scale = canvas.height / 2.4;
  const px = (j) => canvas.width / 2 + scale * pose[3 * j];
  const py = (j) => canvas.height - 20 - scale * (pose[3 * j + 1] + 0.1);
  ctx.lineWidth = 4;
  ctx.lineCap = "round";
  parents().forEach((p, j) => {
    if (p < 0) return;
    ctx.strokeStyle = colorOf(j);
    ctx.beginPath();
    ctx.moveTo(px(p), py(p));
    ctx.lineTo(px(j), py(j));
    ctx.stroke();
  });
  ctx.fillStyle = "#222";
  for (let j = 0; j < pose.length / 3; j++) {
    ctx.beginPath();
    ctx.arc(px(j), py(j), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function fillClasses(select, initial) {
  classPrompts().forEach((p, i) => {
    const o = document.createElement("option");
    o.value = String(i);
    o.textContent = p;
    select.appendChild(o);
  });
  select.value = String(initial);
}

const UPPER = new Set([1, 2, 3, 4, 5]);
let frame = 0;

function tick() {
  frame = (frame + 1) % 100000;
  const t = Number($("noise-t").value);
  $("noise-t-value").textContent = String(t);
  const noisy = noisedPose(Number($("noise-class").value), frame, t, 1000, Number($("noise-seed").value) + frame);
  drawFigure($("noise-canvas"), noisy, () => "#555");
  const blended = partBlend(Number($("upper-class").value), Number($("lower-class").value), frame);
  drawFigure($("blend-canvas"), blended, (j) => (UPPER.has(j) ? "#c62828" : "#2e7d32"));
  setTimeout(() => requestAnimationFrame(tick), 50);
}

await init();
["steps", "beta-start", "beta-end"].forEach((id) => $(id).addEventListener("input", drawCurve));
fillClasses($("noise-class"), 0);
fillClasses($("upper-class"), 0);
fillClasses($("lower-class"), 2);
drawCurve();
tick();
