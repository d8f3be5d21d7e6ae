use serde::{Deserialize, Serialize};

use crate::simfs::{CallKind, FileCall, OpenFlags, SimFs};

/// What the adjuster did to a call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustAction {
    Unchanged,
    /// Offset pulled back to the file size.
    Clamped { from: u64 },
    /// Access moved to an existing file in the same directory.
    Redirected { from: String },
    /// The file is created by this call.
    Created,
    /// `mkdir` of an existing directory became an `fstat`.
    AlreadyThere,
    /// Nothing workable; the call became an `fstat`.
    Fallback { from: CallKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjusted {
    pub call: FileCall,
    pub action: AdjustAction,
}

fn split(path: &str) -> (&str, &str) {
    match path.rfind('/') {
        Some(0) => ("/", &path[1..]),
        Some(i) => (&path[..i], &path[i + 1..]),
        None => ("/", path),
    }
}

fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

/// An existing regular file next to `path`, picked by a hash of the name.
fn sibling(fs: &SimFs, path: &str) -> Option<String> {
    let (dir, name) = split(path);
    let files: Vec<String> = fs
        .dir_entries(dir)
        .into_iter()
        .map(|n| join(dir, &n))
        .filter(|p| fs.stat(p).is_some_and(|s| !s.is_dir))
        .collect();
    if files.is_empty() {
        return None;
    }
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    Some(files[(h % files.len() as u64) as usize].clone())
}

fn fstat(path: &str, like: &FileCall) -> FileCall {
    FileCall::new(CallKind::Fstat, path).at(like.timestamp)
}

/// Rewrites `call` so it executes on `fs`. Total: anything that cannot be
/// repaired becomes an `fstat` of the path, or of `/` if the path is gone.
pub fn adjust_for_image(call: &FileCall, fs: &SimFs) -> Adjusted {
    if fs.check(call).is_ok() {
        return Adjusted {
            call: call.clone(),
            action: AdjustAction::Unchanged,
        };
    }
    if let Some(a) = repair(call, fs) {
        if fs.check(&a.call).is_ok() {
            return a;
        }
    }
    let target = if fs.stat(&call.path).is_some() { call.path.as_str() } else { "/" };
    Adjusted {
        call: fstat(target, call),
        action: AdjustAction::Fallback { from: call.kind },
    }
}

fn repair(call: &FileCall, fs: &SimFs) -> Option<Adjusted> {
    let Some(st) = fs.stat(&call.path) else {
        return missing(call, fs);
    };
    match call.kind {
        CallKind::Mkdir => Some(Adjusted {
            call: fstat(&call.path, call),
            action: AdjustAction::AlreadyThere,
        }),
        CallKind::Read if !st.is_dir && call.offset > st.size => Some(Adjusted {
            call: FileCall {
                offset: st.size,
                ..call.clone()
            },
            action: AdjustAction::Clamped { from: call.offset },
        }),
        _ => None,
    }
}

fn missing(call: &FileCall, fs: &SimFs) -> Option<Adjusted> {
    let (dir, _) = split(&call.path);
    if !fs.stat(dir).is_some_and(|s| s.is_dir) {
        return None;
    }
    if call.kind == CallKind::Unlink {
        return Some(Adjusted {
            call: fstat(dir, call),
            action: AdjustAction::Fallback { from: CallKind::Unlink },
        });
    }
    if call.kind == CallKind::Mkdir {
        return None;
    }
    if let Some(to) = sibling(fs, &call.path) {
        let mut c = FileCall {
            path: to,
            ..call.clone()
        };
        if c.kind == CallKind::Read {
            let size = fs.stat(&c.path).map_or(0, |s| s.size);
            c.offset = c.offset.min(size);
        }
        if c.kind == CallKind::Write {
            c.flags.remove(OpenFlags::CREATE);
        }
        return Some(Adjusted {
            call: c,
            action: AdjustAction::Redirected {
                from: call.path.clone(),
            },
        });
    }
    let c = match call.kind {
        CallKind::Write | CallKind::Open => call.clone().with_flags(call.flags | OpenFlags::CREATE),
        _ => FileCall::new(CallKind::Create, call.path.clone()).at(call.timestamp),
    };
    Some(Adjusted {
        call: c,
        action: AdjustAction::Created,
    })
}
