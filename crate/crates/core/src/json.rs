//! Minimal JSON emission. Output only; nothing here parses JSON.

use alloc::string::String;

pub fn escape_into(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                out.push_str("\\u00");
                let b = c as u32;
                let hex = b"0123456789abcdef";
                out.push(hex[(b >> 4) as usize] as char);
                out.push(hex[(b & 0xf) as usize] as char);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Flat builder for one JSON object or array level.
pub struct Json {
    out: String,
    first: bool,
    closer: char,
}

impl Json {
    pub fn object() -> Self {
        Json {
            out: String::from("{"),
            first: true,
            closer: '}',
        }
    }

    pub fn array() -> Self {
        Json {
            out: String::from("["),
            first: true,
            closer: ']',
        }
    }

    fn sep(&mut self) {
        if self.first {
            self.first = false;
        } else {
            self.out.push(',');
        }
    }

    fn key(&mut self, k: &str) {
        self.sep();
        escape_into(&mut self.out, k);
        self.out.push(':');
    }

    pub fn str(mut self, k: &str, v: &str) -> Self {
        self.key(k);
        escape_into(&mut self.out, v);
        self
    }

    pub fn num(mut self, k: &str, v: impl core::fmt::Display) -> Self {
        self.key(k);
        use core::fmt::Write;
        let _ = write!(self.out, "{v}");
        self
    }

    pub fn bool(mut self, k: &str, v: bool) -> Self {
        self.key(k);
        self.out.push_str(if v { "true" } else { "false" });
        self
    }

    /// Pre-rendered JSON value under a key.
    pub fn raw(mut self, k: &str, v: &str) -> Self {
        self.key(k);
        self.out.push_str(v);
        self
    }

    /// Array element from a pre-rendered JSON value.
    pub fn item(mut self, v: &str) -> Self {
        self.sep();
        self.out.push_str(v);
        self
    }

    pub fn item_num(mut self, v: impl core::fmt::Display) -> Self {
        self.sep();
        use core::fmt::Write;
        let _ = write!(self.out, "{v}");
        self
    }

    pub fn finish(mut self) -> String {
        self.out.push(self.closer);
        self.out
    }
}
