//! Sampling plans: the noise level of every token at every denoising iteration.

use std::fmt::Write as _;

use super::SamplerError;

pub const DEFAULT_DENOISE_STEPS: usize = 30;

/// Inference strategy. Indices are token steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Agents in `generate` are produced; every other present agent is clamped.
    Inpaint { generate: Vec<usize> },
    /// Histories clamped; only `agent`'s future is produced.
    Predict { history: usize, agent: usize },
    /// Histories clamped; all futures produced together.
    Joint { history: usize },
    /// Futures produced one token step at a time, agents in parallel.
    AgenticSync { history: usize },
    /// Like `AgenticSync`, with agent `k+1` delayed by `offset·S_d` iterations
    /// relative to agent `k` inside each token step.
    AgenticAsync { history: usize, offset: f64 },
    /// Token steps in `keyframes` clamped for every agent.
    Inbetween { keyframes: Vec<usize> },
    /// The controller's token at each step is revealed as that step begins;
    /// the other agents respond one token step at a time.
    Control { controller: usize, history: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Inpaint { .. } => "inpaint",
            Strategy::Predict { .. } => "predict",
            Strategy::Joint { .. } => "joint",
            Strategy::AgenticSync { .. } => "agentic-sync",
            Strategy::AgenticAsync { .. } => "agentic-async",
            Strategy::Inbetween { .. } => "inbetween",
            Strategy::Control { .. } => "control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Agent not present; never fed to the model as a valid token.
    Absent,
    /// Clean conditioning for the whole run.
    Clamped,
    /// Denoised from `τ = 1` to `0`, starting at the given iteration.
    Generated { start: usize },
    /// Unknown and not produced: stays pure noise at `τ = 1`.
    Marginal,
    /// Noise at `τ = 1` until the given iteration, clean conditioning after.
    Revealed { at: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub strategy: Strategy,
    pub steps: usize,
    pub agents: usize,
    pub denoise_steps: usize,
    pub iterations: usize,
    /// Row-major over `(step, agent)` like token sequences.
    pub roles: Vec<Role>,
}

impl SamplingPlan {
    pub fn row(&self, i: usize, a: usize) -> usize {
        i * self.agents + a
    }

    /// Noise level of token `r` when iteration `k` starts (`k = iterations` is
    /// the final state).
    pub fn tau(&self, k: usize, r: usize) -> f64 {
        match self.roles[r] {
            Role::Absent | Role::Clamped => 0.0,
            Role::Marginal => 1.0,
            Role::Revealed { at } => {
                if k < at {
                    1.0
                } else {
                    0.0
                }
            }
            Role::Generated { start } => {
                if k <= start {
                    1.0
                } else if k >= start + self.denoise_steps {
                    0.0
                } else {
                    1.0 - (k - start) as f64 / self.denoise_steps as f64
                }
            }
        }
    }

    /// Whether the token holds clean conditioning at iteration `k`.
    pub fn is_clean_condition(&self, k: usize, r: usize) -> bool {
        match self.roles[r] {
            Role::Clamped => true,
            Role::Revealed { at } => k >= at,
            _ => false,
        }
    }

    /// Rows with clamped or revealed conditioning belonging to agent `a`.
    pub fn is_history_of(&self, r: usize, a: usize) -> bool {
        r % self.agents == a && matches!(self.roles[r], Role::Clamped | Role::Revealed { .. })
    }

    /// First iteration at which generated token `r` is denoised.
    pub fn start_of(&self, r: usize) -> Option<usize> {
        match self.roles[r] {
            Role::Generated { start } => Some(start),
            _ => None,
        }
    }

    /// `(iterations + 1) × tokens` schedule.
    pub fn schedule(&self) -> Vec<Vec<f64>> {
        (0..=self.iterations).map(|k| (0..self.roles.len()).map(|r| self.tau(k, r)).collect()).collect()
    }

    /// Debug dump: strategy, parameters, roles and the full schedule.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy {}", self.strategy.name());
        let _ = writeln!(out, "params {:?}", self.strategy);
        let _ = writeln!(out, "steps {}", self.steps);
        let _ = writeln!(out, "agents {}", self.agents);
        let _ = writeln!(out, "denoise_steps {}", self.denoise_steps);
        let _ = writeln!(out, "iterations {}", self.iterations);
        let roles: Vec<String> = self
            .roles
            .iter()
            .map(|r| match r {
                Role::Absent => "absent".to_string(),
                Role::Clamped => "clamped".to_string(),
                Role::Generated { start } => format!("generated@{start}"),
                Role::Marginal => "marginal".to_string(),
                Role::Revealed { at } => format!("revealed@{at}"),
            })
            .collect();
        let _ = writeln!(out, "roles {}", roles.join(" "));
        out.push_str("schedule\n");
        for row in self.schedule() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }
}

fn invalid(msg: impl Into<String>) -> SamplerError {
    SamplerError::InvalidStrategyParams(msg.into())
}

/// Builds the plan for `steps` token steps over agents with the given presence.
pub fn make_plan(
    strategy: &Strategy,
    present: &[bool],
    steps: usize,
    denoise_steps: usize,
) -> Result<SamplingPlan, SamplerError> {
    let agents = present.len();
    if steps == 0 || agents == 0 {
        return Err(invalid("plan needs at least one token step and one agent"));
    }
    if denoise_steps == 0 {
        return Err(invalid("denoise_steps must be positive"));
    }
    let active: Vec<usize> = (0..agents).filter(|a| present[*a]).collect();
    if active.is_empty() {
        return Err(invalid("no present agents"));
    }
    let check_agent = |a: usize, what: &str| {
        if a >= agents || !present[a] {
            Err(invalid(format!("{what} agent {a} is not present")))
        } else {
            Ok(())
        }
    };
    let check_history = |h: usize| {
        if h >= steps {
            Err(invalid(format!("history {h} leaves nothing to generate in {steps} steps")))
        } else {
            Ok(())
        }
    };
    let sd = denoise_steps;
    let mut roles = vec![Role::Absent; steps * agents];
    let mut set = |i: usize, a: usize, r: Role| roles[i * agents + a] = r;
    match strategy {
        Strategy::Inpaint { generate } => {
            if generate.is_empty() {
                return Err(invalid("inpainting needs at least one agent to generate"));
            }
            for &g in generate {
                check_agent(g, "generated")?;
            }
            for i in 0..steps {
                for &a in &active {
                    set(i, a, if generate.contains(&a) { Role::Generated { start: 0 } } else { Role::Clamped });
                }
            }
        }
        Strategy::Predict { history, agent } => {
            check_history(*history)?;
            check_agent(*agent, "predicted")?;
            for i in 0..steps {
                for &a in &active {
                    let r = if i < *history {
                        Role::Clamped
                    } else if a == *agent {
                        Role::Generated { start: 0 }
                    } else {
                        Role::Marginal
                    };
                    set(i, a, r);
                }
            }
        }
        Strategy::Joint { history } => {
            check_history(*history)?;
            for i in 0..steps {
                for &a in &active {
                    set(i, a, if i < *history { Role::Clamped } else { Role::Generated { start: 0 } });
                }
            }
        }
        Strategy::AgenticSync { history } | Strategy::AgenticAsync { history, .. } => {
            check_history(*history)?;
            let offset = match strategy {
                Strategy::AgenticAsync { offset, .. } => {
                    if !(0.0..=1.0).contains(offset) {
                        return Err(invalid(format!("turn-taking offset {offset} outside [0, 1]")));
                    }
                    *offset
                }
                _ => 0.0,
            };
            let delay = (offset * sd as f64).round() as usize;
            let block = sd + delay * (active.len() - 1);
            for i in 0..steps {
                for (k, &a) in active.iter().enumerate() {
                    let r = if i < *history {
                        Role::Clamped
                    } else {
                        Role::Generated { start: (i - history) * block + k * delay }
                    };
                    set(i, a, r);
                }
            }
        }
        Strategy::Inbetween { keyframes } => {
            if let Some(k) = keyframes.iter().find(|k| **k >= steps) {
                return Err(invalid(format!("keyframe {k} outside {steps} steps")));
            }
            if (0..steps).all(|i| keyframes.contains(&i)) {
                return Err(invalid("every step is a keyframe"));
            }
            for i in 0..steps {
                for &a in &active {
                    set(i, a, if keyframes.contains(&i) { Role::Clamped } else { Role::Generated { start: 0 } });
                }
            }
        }
        Strategy::Control { controller, history } => {
            check_history(*history)?;
            check_agent(*controller, "controller")?;
            if active.len() < 2 {
                return Err(invalid("control needs a controlled agent"));
            }
            for i in 0..steps {
                for &a in &active {
                    let r = if i < *history {
                        Role::Clamped
                    } else if a == *controller {
                        Role::Revealed { at: (i - history) * sd }
                    } else {
                        Role::Generated { start: (i - history) * sd }
                    };
                    set(i, a, r);
                }
            }
        }
    }
    let iterations = roles
        .iter()
        .map(|r| match r {
            Role::Generated { start } => start + sd,
            Role::Revealed { at } => *at,
            _ => 0,
        })
        .max()
        .unwrap_or(0);
    Ok(SamplingPlan { strategy: strategy.clone(), steps, agents, denoise_steps, iterations, roles })
}
