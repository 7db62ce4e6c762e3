//! Tabular forward and hindsight-backward policies.
//!
//! Actions are sampled token by token over a small trie: the first token
//! discriminates the action kind (`accept`, one primitive symbol, or the
//! first symbol of a macro expansion), and macro continuations branch
//! over the library's expansions, which stay prefix-free. Every context
//! holds a lazily materialized softmax over its legal tokens; a missing
//! logit reads as zero, so freshly reachable contexts start uniform.
//!
//! Contexts are windowed: the forward context sees the task and the last
//! `window_fwd` serialized actions; the hindsight context additionally
//! sees the current step's execution observation, which the forward
//! policy cannot see at decision time. The window length is the knob
//! that decides whether the family can express the reward-matching flow.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::env::{Action, ActionKind, Environment, ExecObservation, History};
use crate::library::SkillLibrary;
use crate::{Error, Result};

/// One sampling-trie token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Token {
    /// Terminate the episode.
    Accept,
    /// Emit one primitive symbol.
    Prim(char),
    /// One symbol along a macro expansion.
    Macro(char),
}

impl Token {
    pub fn serialize(&self) -> String {
        match self {
            Token::Accept => "!".to_string(),
            Token::Prim(c) => c.to_string(),
            Token::Macro(c) => format!("+{c}"),
        }
    }

    pub fn parse(s: &str) -> Option<Token> {
        let mut chars = s.chars();
        match (chars.next(), chars.next(), chars.next()) {
            (Some('!'), None, _) => Some(Token::Accept),
            (Some('+'), Some(c), None) => Some(Token::Macro(c)),
            (Some(c), None, _) => Some(Token::Prim(c)),
            _ => None,
        }
    }
}

/// Trie path of an action; its length is `K_t`.
pub fn action_token_path(action: &Action) -> Vec<Token> {
    match action.kind {
        ActionKind::Accept => vec![Token::Accept],
        ActionKind::Act => vec![Token::Prim(action.token_seq[0])],
        ActionKind::Skill => action.token_seq.iter().map(|&c| Token::Macro(c)).collect(),
    }
}

/// Legal continuations after a (possibly empty) within-action prefix of
/// macro tokens. Prefix-free expansions make completion unambiguous.
pub fn legal_tokens(env: &Environment, library: &SkillLibrary, prefix: &[Token]) -> Vec<Token> {
    if prefix.is_empty() {
        let mut out = vec![Token::Accept];
        out.extend(env.alphabet.iter().map(|&c| Token::Prim(c)));
        let mut firsts: Vec<char> =
            library.iter().filter_map(|s| s.expansion.chars().next()).collect();
        firsts.sort_unstable();
        firsts.dedup();
        out.extend(firsts.into_iter().map(Token::Macro));
        return out;
    }
    let prefix_str: String = prefix
        .iter()
        .map(|t| match t {
            Token::Macro(c) => *c,
            _ => '\0',
        })
        .collect();
    let mut next: Vec<char> = library
        .iter()
        .filter(|s| s.expansion.starts_with(&prefix_str) && s.expansion.len() > prefix_str.len())
        .map(|s| s.expansion.as_bytes()[prefix_str.len()] as char)
        .collect();
    next.sort_unstable();
    next.dedup();
    next.into_iter().map(Token::Macro).collect()
}

/// Serialized window: the last `k` actions of the history.
pub fn window_string(history: &History, k: usize) -> String {
    let tokens = history.action_tokens();
    let start = tokens.len().saturating_sub(k);
    tokens[start..].join(".")
}

fn prefix_string(prefix: &[Token]) -> String {
    prefix.iter().map(|t| t.serialize()).collect()
}

/// Forward decision context: task, windowed history, within-action prefix.
pub fn forward_key(task_id: &str, window: &str, prefix: &[Token]) -> String {
    format!("{task_id}|{window}|{}", prefix_string(prefix))
}

/// Hindsight context: the forward context plus the current step's
/// execution observation.
pub fn hindsight_key(
    task_id: &str,
    window: &str,
    obs: &ExecObservation,
    prefix: &[Token],
) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{task_id}|{window}|o{}{}|{}",
        obs.progress_signal,
        if obs.terminal_flag { 'T' } else { 'c' },
        prefix_string(prefix)
    );
    s
}

pub type LogitTable = BTreeMap<String, BTreeMap<Token, f64>>;

/// One softmax evaluation: the context, its legal tokens, their
/// probabilities, and which token was realized.
#[derive(Debug, Clone)]
pub struct SoftmaxEval {
    pub key: String,
    pub legal: Vec<Token>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

impl SoftmaxEval {
    pub fn logprob(&self) -> f64 {
        self.probs[self.chosen].ln()
    }
}

/// Tabular policy parameters: forward logits, hindsight backward logits,
/// and one log-partition scalar per task.
#[derive(Debug)]
pub struct PolicyParams {
    forward_logits: LogitTable,
    backward_logits: LogitTable,
    log_partition: BTreeMap<String, f64>,
    pub window_fwd: usize,
    pub window_bwd: usize,
    pub logz_init: f64,
    evals: AtomicU64,
}

impl Clone for PolicyParams {
    fn clone(&self) -> Self {
        PolicyParams {
            forward_logits: self.forward_logits.clone(),
            backward_logits: self.backward_logits.clone(),
            log_partition: self.log_partition.clone(),
            window_fwd: self.window_fwd,
            window_bwd: self.window_bwd,
            logz_init: self.logz_init,
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.forward_logits == other.forward_logits
            && self.backward_logits == other.backward_logits
            && self.log_partition == other.log_partition
            && self.window_fwd == other.window_fwd
            && self.window_bwd == other.window_bwd
    }
}

impl PolicyParams {
    /// Fresh parameters with every task registered at `logz_init`.
    pub fn new(env: &Environment, window_fwd: usize, window_bwd: usize, logz_init: f64) -> Self {
        let log_partition =
            env.tasks.iter().map(|t| (t.id.clone(), logz_init)).collect();
        PolicyParams {
            forward_logits: BTreeMap::new(),
            backward_logits: BTreeMap::new(),
            log_partition,
            window_fwd,
            window_bwd,
            logz_init,
            evals: AtomicU64::new(0),
        }
    }

    /// Current `log Z(q)` for a registered task.
    pub fn log_partition(&self, task_id: &str) -> Result<f64> {
        self.log_partition
            .get(task_id)
            .copied()
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn set_log_partition(&mut self, task_id: &str, value: f64) -> Result<f64> {
        match self.log_partition.get_mut(task_id) {
            Some(v) => {
                let old = *v;
                *v = value;
                Ok(old)
            }
            None => Err(Error::UnknownTask(task_id.to_string())),
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = (&String, &f64)> {
        self.log_partition.iter()
    }

    pub fn reset_log_partitions(&mut self) {
        let init = self.logz_init;
        for v in self.log_partition.values_mut() {
            *v = init;
        }
    }

    pub fn forward_logit(&self, key: &str, token: Token) -> f64 {
        lookup(&self.forward_logits, key, token)
    }

    pub fn backward_logit(&self, key: &str, token: Token) -> f64 {
        lookup(&self.backward_logits, key, token)
    }

    pub fn bump_forward_logit(&mut self, key: &str, token: Token, delta: f64) {
        *self.forward_logits.entry(key.to_string()).or_default().entry(token).or_insert(0.0) +=
            delta;
    }

    pub fn bump_backward_logit(&mut self, key: &str, token: Token, delta: f64) {
        *self.backward_logits.entry(key.to_string()).or_default().entry(token).or_insert(0.0) +=
            delta;
    }

    /// Number of materialized (context, token) entries in both tables.
    pub fn table_entries(&self) -> usize {
        self.forward_logits.values().map(|m| m.len()).sum::<usize>()
            + self.backward_logits.values().map(|m| m.len()).sum::<usize>()
    }

    /// Policy-evaluation counter; diagnostics must not advance it.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn softmax(&self, table: &LogitTable, key: &str, legal: &[Token], chosen: usize) -> SoftmaxEval {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let logits: Vec<f64> = legal.iter().map(|&t| lookup(table, key, t)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let probs = logits.iter().map(|l| (l - m).exp() / total).collect();
        SoftmaxEval { key: key.to_string(), legal: legal.to_vec(), probs, chosen }
    }

    /// Per-token softmax evaluations for an action under the forward table.
    pub fn forward_evals(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        action: &Action,
        history: &History,
    ) -> Result<Vec<SoftmaxEval>> {
        let task = env.task(&history.task_id)?;
        if env.is_terminal(history, task) {
            return Err(Error::TerminalHistory(task.id.clone()));
        }
        validate_action(env, library, action)?;
        let window = window_string(history, self.window_fwd);
        let path = action_token_path(action);
        let mut evals = Vec::with_capacity(path.len());
        for (j, &tok) in path.iter().enumerate() {
            let prefix = &path[..j];
            let legal = legal_tokens(env, library, prefix);
            let chosen = position_of(&legal, tok, action)?;
            let key = forward_key(&history.task_id, &window, prefix);
            evals.push(self.softmax(&self.forward_logits, &key, &legal, chosen));
        }
        Ok(evals)
    }

    /// Per-token softmax evaluations under the backward table, conditioned
    /// on the hindsight state (pre-action history plus this step's
    /// observation).
    pub fn backward_evals(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        action: &Action,
        history: &History,
        obs: &ExecObservation,
    ) -> Result<Vec<SoftmaxEval>> {
        let task = env.task(&history.task_id)?;
        if env.is_terminal(history, task) {
            return Err(Error::TerminalHistory(task.id.clone()));
        }
        validate_action(env, library, action)?;
        if obs.progress_signal < history.progress() {
            return Err(Error::InconsistentObservation(
                "progress signal regressed across the step".into(),
            ));
        }
        if action.kind == ActionKind::Accept
            && (obs.progress_signal != history.progress() || !obs.terminal_flag)
        {
            return Err(Error::InconsistentObservation(
                "accept emits nothing and always terminates".into(),
            ));
        }
        let window = window_string(history, self.window_bwd);
        let path = action_token_path(action);
        let mut evals = Vec::with_capacity(path.len());
        for (j, &tok) in path.iter().enumerate() {
            let prefix = &path[..j];
            let legal = legal_tokens(env, library, prefix);
            let chosen = position_of(&legal, tok, action)?;
            let key = hindsight_key(&history.task_id, &window, obs, prefix);
            evals.push(self.softmax(&self.backward_logits, &key, &legal, chosen));
        }
        Ok(evals)
    }

    /// Per-token-averaged forward log-probability of `action` at `history`.
    pub fn forward_logprob(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        action: &Action,
        history: &History,
    ) -> Result<f64> {
        let evals = self.forward_evals(env, library, action, history)?;
        Ok(mean_logprob(&evals))
    }

    /// Per-token-averaged backward log-probability under the hindsight
    /// context.
    pub fn backward_logprob(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        action: &Action,
        history: &History,
        obs: &ExecObservation,
    ) -> Result<f64> {
        let evals = self.backward_evals(env, library, action, history, obs)?;
        Ok(mean_logprob(&evals))
    }

    /// Unaveraged action log-probability under the forward sampler
    /// (the sum of all trie-token log-probabilities).
    pub fn forward_total_logprob(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        action: &Action,
        history: &History,
    ) -> Result<f64> {
        let evals = self.forward_evals(env, library, action, history)?;
        Ok(evals.iter().map(|e| e.logprob()).sum())
    }

    /// Draw one action token by token from the forward softmax restricted
    /// to legal continuations. Reproducible given the generator state.
    pub fn sample_action(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        history: &History,
        rng: &mut impl Rng,
    ) -> Result<Action> {
        let task = env.task(&history.task_id)?;
        if env.is_terminal(history, task) {
            return Err(Error::TerminalHistory(task.id.clone()));
        }
        let window = window_string(history, self.window_fwd);
        let mut prefix: Vec<Token> = Vec::new();
        loop {
            let legal = legal_tokens(env, library, &prefix);
            let key = forward_key(&history.task_id, &window, &prefix);
            let eval = self.softmax(&self.forward_logits, &key, &legal, 0);
            let mut draw = rng.gen::<f64>();
            let mut pick = legal.len() - 1;
            for (i, p) in eval.probs.iter().enumerate() {
                if draw < *p {
                    pick = i;
                    break;
                }
                draw -= p;
            }
            match legal[pick] {
                Token::Accept => return Ok(Action::accept()),
                Token::Prim(c) => return Ok(Action::primitive(c)),
                Token::Macro(c) => {
                    prefix.push(Token::Macro(c));
                    let word: String = prefix
                        .iter()
                        .map(|t| match t {
                            Token::Macro(ch) => *ch,
                            _ => '\0',
                        })
                        .collect();
                    if let Some(skill) = library.find_by_expansion(&word) {
                        return Ok(Action::skill(skill));
                    }
                }
            }
        }
    }

    /// Shannon entropy of the one-step forward action distribution.
    pub fn flow_entropy(
        &self,
        env: &Environment,
        library: &SkillLibrary,
        history: &History,
    ) -> Result<f64> {
        let task = env.task(&history.task_id)?;
        if env.is_terminal(history, task) {
            return Err(Error::TerminalState);
        }
        let mut entropy = 0.0;
        for action in crate::env::legal_actions(env, library) {
            let p = self.forward_total_logprob(env, library, &action, history)?.exp();
            if p > 0.0 {
                entropy -= p * p.ln();
            }
        }
        Ok(entropy)
    }

    /// Write all tables as line-delimited `(kind, key, token, logit)` /
    /// `(logz, task, value)` records. Exact round-trip.
    pub fn save_checkpoint(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "window_fwd {}", self.window_fwd)?;
        writeln!(w, "window_bwd {}", self.window_bwd)?;
        writeln!(w, "logz_init {:?}", self.logz_init)?;
        for (task, v) in &self.log_partition {
            writeln!(w, "logz {task} {v:?}")?;
        }
        for (table, name) in [(&self.forward_logits, "theta"), (&self.backward_logits, "phi")] {
            for (key, tokens) in table.iter() {
                for (tok, logit) in tokens {
                    writeln!(w, "{name} {key} {} {logit:?}", tok.serialize())?;
                }
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(r: &mut impl std::io::BufRead) -> Result<Self> {
        let mut params = PolicyParams {
            forward_logits: BTreeMap::new(),
            backward_logits: BTreeMap::new(),
            log_partition: BTreeMap::new(),
            window_fwd: 0,
            window_bwd: 0,
            logz_init: 0.0,
            evals: AtomicU64::new(0),
        };
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::Checkpoint { line: i + 1, reason: reason.into() };
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["window_fwd", v] => params.window_fwd = v.parse().map_err(|_| bad("window"))?,
                ["window_bwd", v] => params.window_bwd = v.parse().map_err(|_| bad("window"))?,
                ["logz_init", v] => params.logz_init = v.parse().map_err(|_| bad("float"))?,
                ["logz", task, v] => {
                    params
                        .log_partition
                        .insert(task.to_string(), v.parse().map_err(|_| bad("float"))?);
                }
                [kind @ ("theta" | "phi"), key, tok, v] => {
                    let token = Token::parse(tok).ok_or_else(|| bad("token"))?;
                    let logit: f64 = v.parse().map_err(|_| bad("float"))?;
                    let table = if *kind == "theta" {
                        &mut params.forward_logits
                    } else {
                        &mut params.backward_logits
                    };
                    table.entry(key.to_string()).or_default().insert(token, logit);
                }
                _ => return Err(bad("unrecognized record")),
            }
        }
        Ok(params)
    }
}

fn lookup(table: &LogitTable, key: &str, token: Token) -> f64 {
    table.get(key).and_then(|m| m.get(&token)).copied().unwrap_or(0.0)
}

fn mean_logprob(evals: &[SoftmaxEval]) -> f64 {
    evals.iter().map(|e| e.logprob()).sum::<f64>() / evals.len() as f64
}

fn position_of(legal: &[Token], token: Token, action: &Action) -> Result<usize> {
    legal.iter().position(|&t| t == token).ok_or_else(|| Error::IllegalAction {
        action: action.serialize(),
        reason: format!("token {} is not a legal continuation", token.serialize()),
    })
}

fn validate_action(env: &Environment, library: &SkillLibrary, action: &Action) -> Result<()> {
    match action.kind {
        ActionKind::Accept => Ok(()),
        ActionKind::Act => {
            let sym = action.token_seq.first().copied().unwrap_or(' ');
            if action.token_seq.len() == 1 && env.alphabet.contains(&sym) {
                Ok(())
            } else {
                Err(Error::IllegalAction {
                    action: action.serialize(),
                    reason: "primitive action must emit one alphabet symbol".into(),
                })
            }
        }
        ActionKind::Skill => match library.get(&action.payload) {
            Some(s) if s.expansion.chars().collect::<Vec<_>>() == action.token_seq => Ok(()),
            Some(_) => Err(Error::IllegalAction {
                action: action.serialize(),
                reason: "token sequence does not match the library expansion".into(),
            }),
            None => Err(Error::UnknownSkill(action.payload.clone())),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env_of(alphabet: &str, goal: &str, horizon: usize) -> Environment {
        let task = Task::new("t0", vec![(goal.into(), 1.0)], "g0", vec![], horizon).unwrap();
        Environment::new(alphabet.chars().collect(), vec![task]).unwrap()
    }

    #[test]
    fn uniform_init_gives_log_half_with_two_tokens() {
        // Alphabet {A}, no skills: the only legal first tokens are accept
        // and the primitive, so zero logits give log(1/2).
        let env = env_of("A", "A", 2);
        let lib = SkillLibrary::empty();
        let params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        let lp = params.forward_logprob(&env, &lib, &Action::accept(), &h).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn macro_logprob_is_per_token_mean() {
        // Two macros sharing a first symbol force a real choice at the
        // second position.
        let env = env_of("ABC", "AB", 3);
        let lib = SkillLibrary::from_expansions(&["AB".into(), "AC".into()], 4).unwrap();
        let mut params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        let action = Action::skill(lib.get("s0").unwrap());
        let evals = params.forward_evals(&env, &lib, &action, &h).unwrap();
        assert_eq!(evals.len(), 2);
        let expected = (evals[0].logprob() + evals[1].logprob()) / 2.0;
        let lp = params.forward_logprob(&env, &lib, &action, &h).unwrap();
        assert!((lp - expected).abs() < 1e-15);
        // Geometric-mean identity: exp(lp) = prod_j p_j^(1/K).
        let product: f64 = evals.iter().map(|e| e.probs[e.chosen]).product();
        assert!((lp.exp() - product.sqrt()).abs() < 1e-12);
        // Average of two chosen per-token values, e.g. (-0.1, -0.3) -> -0.2.
        params.bump_forward_logit(&evals[0].key, Token::Macro('A'), 1.0);
        let lp2 = params.forward_logprob(&env, &lib, &action, &h).unwrap();
        let evals2 = params.forward_evals(&env, &lib, &action, &h).unwrap();
        assert!(
            (lp2 - (evals2[0].logprob() + evals2[1].logprob()) / 2.0).abs() < 1e-15
        );
    }

    #[test]
    fn forced_continuation_contributes_zero() {
        let env = env_of("AB", "AB", 3);
        let lib = SkillLibrary::from_expansions(&["AB".into()], 4).unwrap();
        let params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        let action = Action::skill(lib.get("s0").unwrap());
        let evals = params.forward_evals(&env, &lib, &action, &h).unwrap();
        assert_eq!(evals[1].legal.len(), 1);
        assert_eq!(evals[1].logprob(), 0.0);
    }

    #[test]
    fn backward_uniform_is_log_third_and_hindsight_sensitive() {
        // Alphabet {A,B}, no skills: three legal tokens per position.
        let env = env_of("AB", "AB", 3);
        let lib = SkillLibrary::empty();
        let mut params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        let a = Action::primitive('A');
        let obs_hit = ExecObservation { progress_signal: 1, terminal_flag: false };
        let obs_miss = ExecObservation { progress_signal: 0, terminal_flag: false };
        let lp = params.backward_logprob(&env, &lib, &a, &h, &obs_hit).unwrap();
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        // Different execution observations are different contexts, so a
        // single update separates their values.
        let evals = params.backward_evals(&env, &lib, &a, &h, &obs_hit).unwrap();
        params.bump_backward_logit(&evals[0].key, Token::Prim('A'), 0.7);
        let lp_hit = params.backward_logprob(&env, &lib, &a, &h, &obs_hit).unwrap();
        let lp_miss = params.backward_logprob(&env, &lib, &a, &h, &obs_miss).unwrap();
        assert!(lp_hit > lp_miss);
    }

    #[test]
    fn backward_rejects_inconsistent_observations() {
        let env = env_of("AB", "AB", 3);
        let lib = SkillLibrary::empty();
        let params = PolicyParams::new(&env, 2, 2, -2.30);
        let h0 = env.reset(&env.tasks[0]).unwrap();
        let (_, h1) = env.step(&h0, &Action::primitive('A'), &lib).unwrap();
        // Progress can never regress.
        let bad = ExecObservation { progress_signal: 0, terminal_flag: false };
        assert!(matches!(
            params.backward_evals(&env, &lib, &Action::primitive('B'), &h1, &bad),
            Err(Error::InconsistentObservation(_))
        ));
        // Accept cannot advance progress.
        let bad_accept = ExecObservation { progress_signal: 2, terminal_flag: true };
        assert!(matches!(
            params.backward_evals(&env, &lib, &Action::accept(), &h1, &bad_accept),
            Err(Error::InconsistentObservation(_))
        ));
    }

    #[test]
    fn sampling_matches_softmax_and_is_reproducible() {
        let env = env_of("ABC", "AB", 2);
        let lib = SkillLibrary::empty();
        let mut params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();

        // Uniform over 4 legal actions: frequencies within 3 standard errors.
        let n = 100_000;
        let mut counts = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            let a = params.sample_action(&env, &lib, &h, &mut rng).unwrap();
            *counts.entry(a.serialize()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 4);
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        for (_, c) in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() <= 3.0 * se, "freq {freq}");
        }

        // Saturated logit wins almost always.
        let key = forward_key("t0", "", &[]);
        params.bump_forward_logit(&key, Token::Prim('B'), 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hits = (0..10_000)
            .filter(|_| {
                params.sample_action(&env, &lib, &h, &mut rng).unwrap()
                    == Action::primitive('B')
            })
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);

        // Same seed, same sequence.
        let mut r1 = ChaCha8Rng::seed_from_u64(123);
        let mut r2 = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..50 {
            assert_eq!(
                params.sample_action(&env, &lib, &h, &mut r1).unwrap(),
                params.sample_action(&env, &lib, &h, &mut r2).unwrap()
            );
        }
    }

    #[test]
    fn macro_sampling_walks_the_trie() {
        let env = env_of("AB", "ABAB", 4);
        let lib = SkillLibrary::from_expansions(&["AB".into(), "AA".into()], 4).unwrap();
        let params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_skill = false;
        for _ in 0..200 {
            let a = params.sample_action(&env, &lib, &h, &mut rng).unwrap();
            if a.kind == ActionKind::Skill {
                seen_skill = true;
                assert!(lib.get(&a.payload).is_some());
            }
        }
        assert!(seen_skill);
    }

    #[test]
    fn normalization_over_legal_tokens() {
        let env = env_of("AB", "AB", 3);
        let lib = SkillLibrary::from_expansions(&["AB".into(), "AA".into()], 4).unwrap();
        let mut params = PolicyParams::new(&env, 2, 2, -2.30);
        params.bump_forward_logit(&forward_key("t0", "", &[]), Token::Prim('A'), 1.3);
        params.bump_forward_logit(&forward_key("t0", "", &[]), Token::Accept, -0.4);
        let h = env.reset(&env.tasks[0]).unwrap();
        for prefix in [vec![], vec![Token::Macro('A')]] {
            let legal = legal_tokens(&env, &lib, &prefix);
            let key = forward_key("t0", &window_string(&h, 2), &prefix);
            let eval = params.softmax(&params.forward_logits, &key, &legal, 0);
            let total: f64 = eval.probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn action_distribution_sums_to_one() {
        // The trie is a bijection from actions to leaves: total sampler
        // probability over legal actions is exactly one.
        let env = env_of("AB", "AB", 3);
        let lib = SkillLibrary::from_expansions(&["AB".into(), "AA".into(), "BA".into()], 4)
            .unwrap();
        let mut params = PolicyParams::new(&env, 1, 1, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        params.bump_forward_logit(&forward_key("t0", "", &[]), Token::Macro('A'), 0.9);
        params.bump_forward_logit(
            &forward_key("t0", "", &[Token::Macro('A')]),
            Token::Macro('B'),
            -0.5,
        );
        let total: f64 = crate::env::legal_actions(&env, &lib)
            .iter()
            .map(|a| params.forward_total_logprob(&env, &lib, a, &h).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_partition_semantics() {
        let t0 = Task::new("t0", vec![("A".into(), 1.0)], "g", vec![], 2).unwrap();
        let t1 = Task::new("t1", vec![("A".into(), 1.0)], "g", vec![], 2).unwrap();
        let env = Environment::new(vec!['A'], vec![t0, t1]).unwrap();
        let mut params = PolicyParams::new(&env, 2, 2, -2.30);
        assert_eq!(params.log_partition("t0").unwrap(), -2.30);
        assert!(matches!(params.log_partition("nope"), Err(Error::UnknownTask(_))));
        params.set_log_partition("t0", -1.0).unwrap();
        assert_eq!(params.log_partition("t0").unwrap(), -1.0);
        assert_eq!(params.log_partition("t1").unwrap(), -2.30);
    }

    #[test]
    fn window_truncation_aliases_contexts() {
        let env = env_of("AB", "AB", 4);
        let lib = SkillLibrary::empty();
        let h0 = env.reset(&env.tasks[0]).unwrap();
        let (_, ha) = env.step(&h0, &Action::primitive('A'), &lib).unwrap();
        let (_, hab) = env.step(&ha, &Action::primitive('B'), &lib).unwrap();
        let (_, hb) = env.step(&h0, &Action::primitive('B'), &lib).unwrap();
        assert_eq!(window_string(&hab, 1), window_string(&hb, 1));
        assert_ne!(window_string(&hab, 2), window_string(&hb, 2));
    }

    #[test]
    fn flow_entropy_uniform_and_one_hot() {
        let env = env_of("ABC", "AB", 2);
        let lib = SkillLibrary::empty();
        let mut params = PolicyParams::new(&env, 2, 2, -2.30);
        let h = env.reset(&env.tasks[0]).unwrap();
        let ent = params.flow_entropy(&env, &lib, &h).unwrap();
        assert!((ent - 4.0f64.ln()).abs() < 1e-12);
        params.bump_forward_logit(&forward_key("t0", "", &[]), Token::Prim('C'), 60.0);
        let ent = params.flow_entropy(&env, &lib, &h).unwrap();
        assert!(ent < 1e-9);
        // Terminal states have no action distribution.
        let (_, hT) = env.step(&h, &Action::accept(), &lib).unwrap();
        assert!(matches!(params.flow_entropy(&env, &lib, &hT), Err(Error::TerminalState)));
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let env = env_of("AB", "AB", 3);
        let mut params = PolicyParams::new(&env, 3, 2, -2.30);
        params.bump_forward_logit("t0||", Token::Prim('A'), 0.12345678901234567);
        params.bump_forward_logit("t0|A|", Token::Accept, -3.5e-7);
        params.bump_backward_logit("t0||o1c|", Token::Prim('B'), 1.0 / 3.0);
        params.set_log_partition("t0", -1.9876543210987654).unwrap();

        let mut buf1 = Vec::new();
        params.save_checkpoint(&mut buf1).unwrap();
        let loaded = PolicyParams::load_checkpoint(&mut buf1.as_slice()).unwrap();
        assert_eq!(loaded, params);
        let mut buf2 = Vec::new();
        loaded.save_checkpoint(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
    }
}
