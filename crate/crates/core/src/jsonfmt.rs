//! Pretty JSON that stops breaking lines below a fixed nesting depth, so a
//! long pose list stays one pose per line.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;

pub struct ShallowPretty {
    max_depth: usize,
    depth: usize,
    has_value: Vec<bool>,
}

impl ShallowPretty {
    pub fn new(max_depth: usize) -> Self {
        ShallowPretty {
            max_depth,
            depth: 0,
            has_value: Vec::new(),
        }
    }

    fn multiline(&self) -> bool {
        self.depth <= self.max_depth
    }

    fn newline_indent<W: ?Sized + io::Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(b"\n")?;
        for _ in 0..self.depth {
            w.write_all(b"  ")?;
        }
        Ok(())
    }

    fn open<W: ?Sized + io::Write>(&mut self, w: &mut W, c: &[u8]) -> io::Result<()> {
        self.depth += 1;
        self.has_value.push(false);
        w.write_all(c)
    }

    fn close<W: ?Sized + io::Write>(&mut self, w: &mut W, c: &[u8]) -> io::Result<()> {
        let had = self.has_value.pop().unwrap_or(false);
        let multi = self.multiline();
        self.depth -= 1;
        if had && multi {
            self.newline_indent(w)?;
        }
        w.write_all(c)
    }

    fn element<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        if self.multiline() {
            self.newline_indent(w)
        } else if !first {
            w.write_all(b" ")
        } else {
            Ok(())
        }
    }
}

impl Formatter for ShallowPretty {
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.open(w, b"[")
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.close(w, b"]")
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.element(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, _w: &mut W) -> io::Result<()> {
        if let Some(h) = self.has_value.last_mut() {
            *h = true;
        }
        Ok(())
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.open(w, b"{")
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.close(w, b"}")
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.element(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, _w: &mut W) -> io::Result<()> {
        if let Some(h) = self.has_value.last_mut() {
            *h = true;
        }
        Ok(())
    }
}

pub fn to_string<T: Serialize + ?Sized>(value: &T, max_depth: usize) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ShallowPretty::new(max_depth));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn breaks_only_shallow_containers() {
        let v = json!({"a": [{"p": [1.0, 2.0], "q": 3}], "b": {}});
        let s = to_string(&v, 2).unwrap();
        assert_eq!(s, "{\n  \"a\": [\n    {\"p\": [1.0, 2.0], \"q\": 3}\n  ],\n  \"b\": {}\n}\n");
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
