/** Zoom/pan transform between screen (canvas) and image pixel coordinates.
 *
 * screen = image * zoom + pan. Zoom factors are powers of two and pans are
 * kept integral, so integer image pixels map to exact float positions and
 * back without rounding drift at any zoom level.
 */

export interface Point {
  x: number;
  y: number;
}

export class ViewTransform {
  zoom: number;
  panX: number;
  panY: number;

  constructor(zoom = 1, panX = 0, panY = 0) {
    if (zoom <= 0) {
      throw new Error(`zoom must be positive, got ${zoom}`);
    }
    this.zoom = zoom;
    this.panX = panX;
    this.panY = panY;
  }

  imageToScreen(p: Point): Point {
    return { x: p.x * this.zoom + this.panX, y: p.y * this.zoom + this.panY };
  }

  screenToImage(p: Point): Point {
    return {
      x: (p.x - this.panX) / this.zoom,
      y: (p.y - this.panY) / this.zoom,
    };
  }

  /** Zoom by a factor keeping the given screen point fixed. */
  zoomAt(factor: number, screen: Point): void {
    if (factor <= 0) {
      throw new Error(`zoom factor must be positive, got ${factor}`);
    }
    const anchor = this.screenToImage(screen);
    this.zoom *= factor;
    this.panX = screen.x - anchor.x * this.zoom;
    this.panY = screen.y - anchor.y * this.zoom;
  }

  panBy(dx: number, dy: number): void {
    this.panX += dx;
    this.panY += dy;
  }
}
