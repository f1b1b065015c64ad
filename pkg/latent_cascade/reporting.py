"""
报告输出

- CSV：带表头，浮点数统一 %.17g，保证可逐位复现
- 键值文本：每行 `key: value`，按给定顺序输出
- 直方图：SVG 柱状图，以及用 Pillow 绘制的 PNG 预览
"""

import csv
import io
import os
from typing import Any, Iterable, List, Mapping, Optional, Sequence, Tuple

from .api import logger

FLOAT_FORMAT = "%.17g"


def format_value(value: Any) -> str:
    """统一的数值格式化；bool 与 None 原样输出"""
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    if hasattr(value, "dtype") and getattr(value, "shape", None) == ():
        return format_value(value.item())
    return str(value)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: str) -> Tuple[List[str], List[List[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        return [], []
    return rows[0], rows[1:]


def write_key_values(path: str, items: Mapping[str, Any]) -> str:
    """写结构化键值文本，键顺序即插入顺序"""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in items.items():
            f.write(f"{key}: {format_value(value)}\n")
    logger.debug(f"Wrote {path}")
    return path


def read_key_values(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or ":" not in line:
                continue
            key, value = line.split(":", 1)
            out[key.strip()] = value.strip()
    return out


def write_lines(path: str, lines: Iterable[str]) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(f"{line}\n")
    logger.debug(f"Wrote {path}")
    return path


# =============================================
# 直方图
# =============================================

def histogram_rows(edges: Sequence[float], counts: Sequence[int]) -> List[Tuple[float, float, int]]:
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]


def write_histogram_csv(path: str, edges: Sequence[float], counts: Sequence[int]) -> str:
    return write_csv(path, ["bin_left", "bin_right", "count"], histogram_rows(edges, counts))


def histogram_svg(edges: Sequence[float], counts: Sequence[int], title: str = "",
                  width: int = 640, height: int = 360) -> str:
    """生成柱状图 SVG 文本（x 轴为范数，y 轴为计数）"""
    margin = 40
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    n = max(len(counts), 1)
    peak = max(max(counts) if len(counts) else 0, 1)
    bar_w = plot_w / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for i, count in enumerate(counts):
        h = plot_h * (count / peak)
        x = margin + i * bar_w
        y = margin + plot_h - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(bar_w - 1, 0.5):.2f}" height="{h:.2f}" '
            f'fill="steelblue"><title>[{edges[i]:.4f}, {edges[i + 1]:.4f}): {int(count)}</title></rect>'
        )
    axis_y = margin + plot_h
    parts.append(f'<line x1="{margin}" y1="{axis_y}" x2="{margin + plot_w}" y2="{axis_y}" stroke="black"/>')
    if len(edges):
        parts.append(f'<text x="{margin}" y="{axis_y + 16}" font-family="sans-serif" font-size="11">'
                     f'{edges[0]:.3f}</text>')
        parts.append(f'<text x="{margin + plot_w}" y="{axis_y + 16}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{edges[-1]:.3f}</text>')
    parts.append(f'<text x="{margin - 6}" y="{margin + 4}" text-anchor="end" '
                 f'font-family="sans-serif" font-size="11">{peak}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_histogram_svg(path: str, edges: Sequence[float], counts: Sequence[int], title: str = "") -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(histogram_svg(edges, counts, title))
    logger.debug(f"Wrote {path}")
    return path


def render_histogram_png(edges: Sequence[float], counts: Sequence[int], title: str = "",
                         width: int = 640, height: int = 360) -> Optional[bytes]:
    """用 Pillow 绘制直方图 PNG

    Returns:
        PNG 字节；未安装 Pillow 时返回 None
    """
    try:
        from PIL import Image, ImageDraw, ImageFont
    except ImportError:
        logger.warning("PIL not available, skipping PNG histogram")
        return None

    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    try:
        font = ImageFont.load_default()
    except Exception:
        font = None

    margin = 40
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    n = max(len(counts), 1)
    peak = max(max(counts) if len(counts) else 0, 1)
    bar_w = plot_w / n
    for i, count in enumerate(counts):
        h = int(round(plot_h * (count / peak)))
        x0 = int(margin + i * bar_w)
        x1 = max(int(margin + (i + 1) * bar_w) - 1, x0)
        if h > 0:
            draw.rectangle([(x0, margin + plot_h - h), (x1, margin + plot_h)], fill=(70, 130, 180))
    draw.line([(margin, margin + plot_h), (margin + plot_w, margin + plot_h)], fill=(0, 0, 0), width=1)
    draw.line([(margin, margin), (margin, margin + plot_h)], fill=(0, 0, 0), width=1)
    if font:
        if title:
            draw.text((margin, 8), title, fill=(0, 0, 0), font=font)
        if len(edges):
            draw.text((margin, margin + plot_h + 6), f"{edges[0]:.3f}", fill=(0, 0, 0), font=font)
            draw.text((margin + plot_w - 40, margin + plot_h + 6), f"{edges[-1]:.3f}", fill=(0, 0, 0), font=font)
        draw.text((4, margin), str(peak), fill=(0, 0, 0), font=font)

    output = io.BytesIO()
    img.save(output, format="PNG")
    return output.getvalue()


def write_histogram_png(path: str, edges: Sequence[float], counts: Sequence[int], title: str = "") -> Optional[str]:
    data = render_histogram_png(edges, counts, title)
    if data is None:
        return None
    _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug(f"Wrote {path}")
    return path
