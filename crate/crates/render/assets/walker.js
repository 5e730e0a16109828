(() => {
  const r2 = (v) => Math.round(v * 100) / 100;
  const rgb = (c) => {
    const nums = (c.match(/-?\d+(\.\d+)?/g) || []).map(Number);
    const scale = c.startsWith("color(") ? 255 : 1;
    return [0, 1, 2].map((i) => Math.max(0, Math.min(255, Math.round((nums[i] || 0) * scale))));
  };
  const sx = window.scrollX, sy = window.scrollY;
  const walk = (el) => {
    const cs = getComputedStyle(el);
    if (cs.display === "none") return null;
    const r = el.getBoundingClientRect();
    let text = "";
    for (const n of el.childNodes) if (n.nodeType === 3) text += n.nodeValue;
    text = text.replace(/\s+/g, " ").trim();
    const node = {
      tag: el.localName,
      bbox: [r2(r.left + sx), r2(r.top + sy), r2(r.width), r2(r.height)],
      children: [],
    };
    if (text) {
      node.text = text;
      node.color = rgb(cs.color);
    }
    for (const c of el.children) {
      const k = walk(c);
      if (k) node.children.push(k);
    }
    return node;
  };
  const de = document.documentElement;
  const body = document.body;
  return JSON.stringify({
    root: walk(de),
    width: Math.max(de.scrollWidth, body ? body.scrollWidth : 0),
    height: Math.max(de.scrollHeight, body ? body.scrollHeight : 0),
  });
})()
