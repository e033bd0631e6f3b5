use std::fmt::Write as _;

use super::backend::{ChatMessage, DIGEST_TAG};
use super::constraint::{Comparison, ConstraintRule, GuardField};
use super::memory::Retrieved;
use super::scripted::DecisionContext;
use crate::sim::{Maneuver, ScenarioKind};

pub const N_SHOT: usize = 3;
pub const MAX_PROMPT_TOKENS: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    pub digest: DecisionContext,
}

impl Prompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(&self.system), ChatMessage::user(&self.user)]
    }

    pub fn token_estimate(&self) -> usize {
        estimate_tokens(&self.system) + estimate_tokens(&self.user)
    }
}

/// Rough count: four characters per token.
pub fn estimate_tokens(s: &str) -> usize {
    s.chars().count().div_ceil(4)
}

/// Contents of the last `<tag>…</tag>` block.
pub fn extract_tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.rfind(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(&text[start..end])
}

fn road_layout(kind: ScenarioKind) -> &'static str {
    match kind {
        ScenarioKind::Intersection => {
            "Unsignalised four-way intersection. You approach eastbound and must turn left \
             onto the northbound exit. Crossing traffic comes from the east (westbound), \
             the south (northbound) and the north (southbound)."
        }
        ScenarioKind::Merge => {
            "On-ramp merge. Two mainline lanes (0 = leftmost, 1) and an acceleration lane 2 \
             that ends at x = 200 m. You must enter lane 1 before the ramp ends."
        }
        ScenarioKind::Highway => {
            "Straight four-lane highway, lanes 0 (leftmost) to 3. Keep a high, safe speed."
        }
    }
}

fn describe_rule(r: &ConstraintRule) -> String {
    let guard: Vec<String> = r
        .guard
        .iter()
        .map(|c| {
            let field = match c.field {
                GuardField::TauMin => "tau_min",
                GuardField::EgoSpeed => "ego_speed",
            };
            let op = match c.cmp {
                Comparison::Lt => "<",
                Comparison::Gt => ">",
            };
            format!("{field} {op} {}", c.threshold)
        })
        .collect();
    format!(
        "never choose {} in {} when {}",
        r.forbidden_action,
        r.scenario_kind,
        guard.join(" and ")
    )
}

fn system_message(constraints: &[ConstraintRule], lessons: &[String]) -> String {
    let mut s = String::new();
    s.push_str(
        "You are the teacher for an autonomous vehicle's high-level decision maker. \
         Each step you pick exactly one maneuver for the ego vehicle.\n\n",
    );
    s.push_str("Action vocabulary:\n");
    for m in Maneuver::ALL {
        let _ = writeln!(s, "- {}", m.token());
    }
    s.push_str(
        "\nDriving heuristics:\n\
         - tau is the time until a vehicle reaches its closest point to you; below 2 s is a near conflict.\n\
         - Yield to crossing or leading vehicles in conflict before seeking speed.\n\
         - Change lanes only into a gap that the follower can accept without hard braking.\n",
    );
    if !constraints.is_empty() {
        s.push_str("\nActive constraints:\n");
        for r in constraints {
            let _ = writeln!(s, "- {}", describe_rule(r));
        }
    }
    if !lessons.is_empty() {
        s.push_str("\nLessons from earlier reflection:\n");
        for l in lessons {
            let _ = writeln!(s, "- {l}");
        }
    }
    s.push_str(
        "\nReason step by step: (1) how severe a collision could be, (2) short and long term \
         consequences of each maneuver, (3) the effect on surrounding traffic. Then end with a \
         single line holding a JSON object {\"action\": <one token above>, \"reason\": <text>}.\n",
    );
    s
}

fn fmt_tau(t: Option<f64>) -> String {
    t.map_or("none".to_string(), |t| format!("{t:.2} s"))
}

fn user_message(dc: &DecisionContext, retrieved: &[Retrieved<'_>], shown: usize) -> String {
    let d = &dc.driving;
    let mut s = String::new();
    let _ = writeln!(s, "Scenario: {}. {}", d.scenario, road_layout(d.scenario));
    let _ = writeln!(
        s,
        "Ego: x {:.1} m, y {:.1} m, speed {:.1} m/s (target {:.1}), heading {:.2} rad, lane {}{}.",
        dc.ego_x,
        dc.ego_y,
        dc.ego_speed,
        d.desired_speed,
        dc.ego_heading,
        d.ego_lane,
        d.goal_lane.map_or(String::new(), |g| format!(", goal lane {g}"))
    );
    if dc.neighbors.is_empty() {
        s.push_str("No vehicles within sensing range.\n");
    } else {
        let _ = writeln!(s, "Vehicles (nearest first, {} of {}):", shown, dc.neighbors.len());
        for n in dc.neighbors.iter().take(shown) {
            let _ = writeln!(
                s,
                "- vehicle {}: dx {:.1} m, dy {:.1} m, speed {:.1} m/s, heading {:.2} rad, tau {}",
                n.id,
                n.dx,
                n.dy,
                n.speed,
                n.heading,
                fmt_tau(n.tau)
            );
        }
    }
    let _ = writeln!(s, "Risk summary: tau_min = {}.", fmt_tau(dc.tau_min));
    if !retrieved.is_empty() {
        s.push_str("\nSimilar past situations (most similar first):\n");
        for (k, r) in retrieved.iter().enumerate() {
            let e = r.entry;
            let _ = writeln!(
                s,
                "<example {}> similarity {:.3}; state tau block [{}] -> action {} -> outcome {:?}, return {:.2}{}",
                k + 1,
                r.similarity,
                e.z.as_slice()[e.z.as_slice().len() - 6..]
                    .iter()
                    .map(|v| format!("{v:.1}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                e.action,
                e.outcome,
                e.ret,
                if e.lesson.is_empty() {
                    String::new()
                } else {
                    format!("; lesson: {}", e.lesson)
                }
            );
        }
    }
    let digest = serde_json::to_string(dc).expect("digest serialises");
    let _ = write!(s, "\n<{DIGEST_TAG}>{digest}</{DIGEST_TAG}>");
    s
}

/// Builds the decision prompt, dropping the farthest vehicles from the
/// narration (then lessons) until the estimate fits the token budget.
pub fn build_prompt(
    dc: DecisionContext,
    retrieved: &[Retrieved<'_>],
    lessons: &[String],
) -> Prompt {
    let retrieved = &retrieved[..retrieved.len().min(N_SHOT)];
    let mut lessons: Vec<String> = lessons.to_vec();
    let mut shown = dc.neighbors.len();
    loop {
        let p = Prompt {
            system: system_message(&dc.constraints, &lessons),
            user: user_message(&dc, retrieved, shown),
            digest: dc.clone(),
        };
        if p.token_estimate() <= MAX_PROMPT_TOKENS {
            return p;
        }
        if shown > 0 {
            shown -= 1;
        } else if !lessons.is_empty() {
            lessons.remove(0);
        } else {
            return p;
        }
    }
}
