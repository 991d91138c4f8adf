//! Pure rendering of environment states to 32x32 RGB frames.
//!
//! Each cell's background pattern is position-coded: two accent pixels whose
//! in-cell locations are a function of the cell coordinates, so all 64
//! grid cells render distinct 4x4 patches. This keeps the patch vocabulary
//! rich enough that a fitted codebook is informative and no single token
//! dominates expert data.

use super::{chase_target, Cell, EnvState, Frame, StateKind, CELL, FRAME_H, FRAME_W, GRID};

type Rgb = [u8; 3];

const BG_BASE: Rgb = [18, 18, 38];
const BG_ACCENT1: Rgb = [44, 44, 82];
const BG_ACCENT2: Rgb = [30, 56, 62];
const TRAIL: Rgb = [72, 72, 96];
const GOAL_BODY: Rgb = [240, 200, 70];
const GOAL_GLOW: Rgb = [255, 250, 170];
const AGENT_BODY: [Rgb; 2] = [[70, 200, 220], [230, 120, 60]];
const AGENT_ARM: [Rgb; 2] = [[46, 148, 168], [178, 82, 40]];
const TARGET_BRIGHT: Rgb = [250, 90, 90];
const TARGET_DARK: Rgb = [150, 40, 40];
const SCORE_BG: Rgb = [60, 20, 60];
const SCORE_MARK: Rgb = [255, 230, 90];
const BALL_CORE: Rgb = [250, 250, 250];
const BALL_RING: Rgb = [140, 140, 160];
const PADDLE_BODY: [Rgb; 2] = [[90, 220, 120], [220, 90, 200]];
const PADDLE_EDGE: [Rgb; 2] = [[50, 160, 80], [160, 50, 140]];

fn fill_cell(f: &mut Frame, cx: i32, cy: i32, color: Rgb) {
    let (x0, y0) = (cx as usize * CELL, cy as usize * CELL);
    for y in 0..CELL {
        for x in 0..CELL {
            f.put(y0 + y, x0 + x, color);
        }
    }
}

/// Position-coded background cell: base fill plus two accent pixels whose
/// positions encode (cx mod 4, cy mod 4) and the grid quadrant.
fn bg_cell(f: &mut Frame, cx: i32, cy: i32) {
    fill_cell(f, cx, cy, BG_BASE);
    let (x0, y0) = (cx as usize * CELL, cy as usize * CELL);
    let a1 = ((cx % 4) as usize, (cy % 4) as usize);
    let a2 = ((cx / 4) as usize * 2 + 1, (cy / 4) as usize * 2 + 1);
    f.put(y0 + a1.1, x0 + a1.0, BG_ACCENT1);
    f.put(y0 + a2.1, x0 + a2.0, BG_ACCENT2);
}

fn diamond_cell(f: &mut Frame, cx: i32, cy: i32, inner: Rgb, corner: Rgb) {
    let (x0, y0) = (cx as usize * CELL, cy as usize * CELL);
    for y in 0..CELL {
        for x in 0..CELL {
            let is_corner = (x == 0 || x == 3) && (y == 0 || y == 3);
            f.put(y0 + y, x0 + x, if is_corner { corner } else { inner });
        }
    }
}

fn cross_cell(f: &mut Frame, cx: i32, cy: i32, diag: Rgb, rest: Rgb) {
    let (x0, y0) = (cx as usize * CELL, cy as usize * CELL);
    for y in 0..CELL {
        for x in 0..CELL {
            let on = x == y || x + y == 3;
            f.put(y0 + y, x0 + x, if on { diag } else { rest });
        }
    }
}

fn agent_sprite(f: &mut Frame, pos: Cell, variant: usize) {
    // plus-shaped: four opaque arm cells (clipped at borders), then the body
    let arms = [(0, -1), (0, 1), (-1, 0), (1, 0)];
    for (dx, dy) in arms {
        let (ax, ay) = (pos.0 + dx, pos.1 + dy);
        if (0..GRID).contains(&ax) && (0..GRID).contains(&ay) {
            diamond_cell(f, ax, ay, AGENT_ARM[variant], BG_BASE);
        }
    }
    fill_cell(f, pos.0, pos.1, AGENT_BODY[variant]);
    let (x0, y0) = (pos.0 as usize * CELL, pos.1 as usize * CELL);
    if variant == 0 {
        f.put(y0, x0, AGENT_ARM[0]);
    } else {
        // hollow center marks the second embodiment
        f.put(y0 + 1, x0 + 1, AGENT_ARM[1]);
        f.put(y0 + 1, x0 + 2, AGENT_ARM[1]);
        f.put(y0 + 2, x0 + 1, AGENT_ARM[1]);
        f.put(y0 + 2, x0 + 2, AGENT_ARM[1]);
    }
}

fn chebyshev(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Render a state to a frame. Pure: depends on nothing but `state`.
pub fn render(state: &EnvState) -> Frame {
    let mut f = Frame::new(FRAME_H, FRAME_W);
    let variant = state.variant_id as usize;
    match &state.kind {
        StateKind::Reach { agent, goal, prev } => {
            for cy in 0..GRID {
                for cx in 0..GRID {
                    bg_cell(&mut f, cx, cy);
                }
            }
            if let Some(p) = prev {
                cross_cell(&mut f, p.0, p.1, TRAIL, BG_BASE);
            }
            let glow = chebyshev(*agent, *goal) <= 1;
            diamond_cell(&mut f, goal.0, goal.1, GOAL_BODY, if glow { GOAL_GLOW } else { BG_BASE });
            agent_sprite(&mut f, *agent, variant);
        }
        StateKind::Chase { agent, phase, prev } => {
            for cy in 0..GRID {
                for cx in 0..GRID {
                    bg_cell(&mut f, cx, cy);
                }
            }
            if let Some(p) = prev {
                cross_cell(&mut f, p.0, p.1, TRAIL, BG_BASE);
            }
            let target = chase_target(*phase, state.step);
            cross_cell(&mut f, target.0, target.1, TARGET_BRIGHT, TARGET_DARK);
            agent_sprite(&mut f, *agent, variant);
        }
        StateKind::Pong { paddle, ball, score, .. } => {
            // scoreboard strip in row 0: one mark per conceded point
            for cx in 0..GRID {
                fill_cell(&mut f, cx, 0, if (cx as u32) < *score { SCORE_MARK } else { SCORE_BG });
            }
            for cy in 1..GRID {
                for cx in 0..GRID {
                    bg_cell(&mut f, cx, cy);
                }
            }
            diamond_cell(&mut f, ball.0, ball.1, BALL_CORE, BALL_RING);
            // paddle occupies two cells on the right column
            let col = GRID - 1;
            let (x0, y0) = (col as usize * CELL, *paddle as usize * CELL);
            for y in 0..2 * CELL {
                for x in 0..CELL {
                    let edge = y == 0 || y == 2 * CELL - 1 || x == 0;
                    f.put(
                        y0 + y,
                        x0 + x,
                        if edge { PADDLE_EDGE[variant] } else { PADDLE_BODY[variant] },
                    );
                }
            }
        }
    }
    f
}

/// Count of distinct colors across a set of frames (test aid).
pub fn palette_size(frames: &[Frame]) -> usize {
    let mut colors = std::collections::BTreeSet::new();
    for f in frames {
        for c in f.pixels.chunks_exact(3) {
            colors.insert([c[0], c[1], c[2]]);
        }
    }
    colors.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{reset, rollout, oracle_policy, EnvId, ALL_ENVS};

    #[test]
    fn rendering_is_pure() {
        let (s, f) = reset(EnvId::Chase, 1, 5).unwrap();
        assert_eq!(render(&s), f);
        assert_eq!(render(&s), render(&s));
    }

    #[test]
    fn palette_stays_within_sixteen_colors() {
        for env in ALL_ENVS {
            let mut frames = Vec::new();
            for seed in 0..6 {
                for v in 0..2 {
                    let ep = rollout(env, v, seed, |s| oracle_policy(s)).unwrap();
                    frames.extend(ep.frames);
                }
            }
            let n = palette_size(&frames);
            assert!(n <= 16, "{} uses {n} colors", env.name());
        }
    }

    #[test]
    fn background_cells_are_pairwise_distinct() {
        // strip all sprites by rendering background only
        let mut f = Frame::new(FRAME_H, FRAME_W);
        for cy in 0..GRID {
            for cx in 0..GRID {
                bg_cell(&mut f, cx, cy);
            }
        }
        let mut patches = std::collections::BTreeSet::new();
        for cy in 0..GRID as usize {
            for cx in 0..GRID as usize {
                let mut patch = Vec::new();
                for y in 0..CELL {
                    for x in 0..CELL {
                        patch.push(f.get(cy * CELL + y, cx * CELL + x));
                    }
                }
                patches.insert(patch);
            }
        }
        assert_eq!(patches.len(), 64, "all background cells must be distinct");
    }

    #[test]
    fn variants_render_differently() {
        let (s0, f0) = reset(EnvId::Reach, 0, 3).unwrap();
        let (_s1, f1) = reset(EnvId::Reach, 1, 3).unwrap();
        assert_eq!(s0.step, 0);
        assert_ne!(f0, f1, "variant should change the sprite");
    }
}
