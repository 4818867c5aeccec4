use super::{Command, Kwargs, Value, VarId, PLACEHOLDER};
use crate::{Error, Result};

/// Parses one command line.
pub fn parse_command(line: &str) -> Result<Command> {
    let mut p = Parser::new(line);
    let cmd = p.command()?;
    p.end()?;
    Ok(cmd)
}

/// Parses a block of commands, one per non-blank line. Error offsets are
/// relative to the whole block.
pub fn parse_commands(text: &str) -> Result<Vec<Command>> {
    let mut out = Vec::new();
    let mut base = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let body = line.trim_end_matches(['\n', '\r']);
            out.push(parse_command(body).map_err(|e| shift(e, base))?);
        }
        base += line.len();
    }
    Ok(out)
}

/// Parses a single value literal, e.g. `"Paris"` or `3`.
pub fn parse_value(text: &str) -> Result<Value> {
    let mut p = Parser::new(text);
    p.ws();
    let v = p.value()?;
    p.end()?;
    Ok(v)
}

/// Parses a bare keyword-argument list, e.g. `city="Paris", nights=3`.
pub fn parse_kwargs(text: &str) -> Result<Kwargs> {
    let mut p = Parser::new(text);
    p.ws();
    let args = if p.at_end() { Vec::new() } else { p.kwargs()? };
    p.end()?;
    Ok(args)
}

fn shift(e: Error, by: usize) -> Error {
    match e {
        Error::Syntax {
            offset,
            expected,
            found,
        } => Error::Syntax {
            offset: offset + by,
            expected,
            found,
        },
        other => other,
    }
}

pub(super) struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    pub(super) fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    pub(super) fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    pub(super) fn ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    pub(super) fn error<T>(&self, expected: &[&'static str]) -> Result<T> {
        self.error_at(self.pos, expected)
    }

    fn error_at<T>(&self, offset: usize, expected: &[&'static str]) -> Result<T> {
        let found = match self.src[offset..].chars().next() {
            None => "end of input".to_string(),
            Some(c) => format!("`{c}`"),
        };
        Err(Error::Syntax {
            offset,
            expected: expected.to_vec(),
            found,
        })
    }

    pub(super) fn end(&mut self) -> Result<()> {
        self.ws();
        if self.at_end() {
            Ok(())
        } else {
            self.error(&["end of line"])
        }
    }

    pub(super) fn eat(&mut self, tok: &str) -> bool {
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    pub(super) fn expect(&mut self, tok: &'static str) -> Result<()> {
        self.ws();
        if self.eat(tok) {
            Ok(())
        } else {
            self.error(&[tok])
        }
    }

    /// Reads an identifier at the cursor without skipping whitespace.
    pub(super) fn ident(&mut self) -> Option<&'a str> {
        let rest = self.rest();
        let mut len = 0;
        for (i, b) in rest.bytes().enumerate() {
            let ok = if i == 0 {
                b.is_ascii_alphabetic() || b == b'_'
            } else {
                b.is_ascii_alphanumeric() || b == b'_'
            };
            if !ok {
                break;
            }
            len = i + 1;
        }
        if len == 0 {
            return None;
        }
        self.pos += len;
        Some(&rest[..len])
    }

    pub(super) fn expect_ident(&mut self, what: &'static str) -> Result<&'a str> {
        self.ws();
        match self.ident() {
            Some(id) => Ok(id),
            None => self.error(&[what]),
        }
    }

    pub(super) fn expect_var(&mut self) -> Result<VarId> {
        self.ws();
        let start = self.pos;
        match self.ident().and_then(as_var) {
            Some(v) => Ok(v),
            None => self.error_at(start, &["variable"]),
        }
    }

    fn command(&mut self) -> Result<Command> {
        self.ws();
        let start = self.pos;
        let Some(head) = self.ident() else {
            return self.error(&["variable", "`say`", "`confirm`"]);
        };
        if let Some(var) = as_var(head) {
            self.ws();
            if self.eat("=") {
                let intent = self.expect_ident("intent name")?.to_string();
                self.expect("(")?;
                let args = self.kwargs_until(')')?;
                self.expect(")")?;
                return Ok(Command::IntentCall { var, intent, args });
            }
            if self.eat(".") {
                let slot = self.expect_ident("slot name")?.to_string();
                self.expect("=")?;
                self.ws();
                let value = self.value()?;
                return Ok(Command::AttrAssign { var, slot, value });
            }
            return self.error(&["`=`", "`.`"]);
        }
        match head {
            "say" => {
                self.expect("(")?;
                let args = self.kwargs_until(')')?;
                self.expect(")")?;
                Ok(Command::Say { args })
            }
            "confirm" => {
                self.expect("(")?;
                let var = self.expect_var()?;
                self.expect(")")?;
                Ok(Command::Confirm { var })
            }
            _ => self.error_at(start, &["variable", "`say`", "`confirm`"]),
        }
    }

    /// Keyword arguments, possibly empty when the closing delimiter follows.
    pub(super) fn kwargs_until(&mut self, close: char) -> Result<Kwargs> {
        self.ws();
        if self.peek() == Some(close) {
            return Ok(Vec::new());
        }
        self.kwargs()
    }

    pub(super) fn kwargs(&mut self) -> Result<Kwargs> {
        let mut args: Kwargs = Vec::new();
        loop {
            self.ws();
            let key_at = self.pos;
            let key = self.expect_ident("keyword")?.to_string();
            if args.iter().any(|(k, _)| *k == key) {
                return self.error_at(key_at, &["unique keyword"]);
            }
            self.expect("=")?;
            self.ws();
            let value = self.value()?;
            args.push((key, value));
            self.ws();
            if !self.eat(",") {
                return Ok(args);
            }
        }
    }

    pub(super) fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some('"') => self.string().map(Value::Text),
            Some('<') => {
                if self.eat(PLACEHOLDER) {
                    Ok(Value::Placeholder)
                } else {
                    self.error(&["`<STR>`"])
                }
            }
            Some('[') => {
                self.pos += 1;
                let mut items = Vec::new();
                self.ws();
                if self.eat("]") {
                    return Ok(Value::List(items));
                }
                loop {
                    self.ws();
                    items.push(self.value()?);
                    self.ws();
                    if self.eat("]") {
                        return Ok(Value::List(items));
                    }
                    if !self.eat(",") {
                        return self.error(&["`,`", "`]`"]);
                    }
                }
            }
            Some(c) if c == '-' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let start = self.pos;
                let id = self.ident().unwrap_or_default();
                match id {
                    "True" => Ok(Value::Boolean(true)),
                    "False" => Ok(Value::Boolean(false)),
                    _ => match as_var(id) {
                        Some(var) => {
                            if self.eat(".") {
                                let slot = self.ident();
                                match slot {
                                    Some(s) => Ok(Value::AttrRef(var, s.to_string())),
                                    None => self.error(&["slot name"]),
                                }
                            } else {
                                Ok(Value::VarRef(var))
                            }
                        }
                        None => self.error_at(start, VALUE_START),
                    },
                }
            }
            _ => self.error(VALUE_START),
        }
    }

    pub(super) fn string(&mut self) -> Result<String> {
        let start = self.pos;
        if !self.eat("\"") {
            return self.error(&["string"]);
        }
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => {
                    let Some((j, esc)) = chars.next() else { break };
                    match esc {
                        '"' => out.push('"'),
                        '\\' => out.push('\\'),
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        'u' => {
                            let body = &self.rest()[j + 1..];
                            let parsed = body
                                .strip_prefix('{')
                                .and_then(|b| b.split_once('}'))
                                .and_then(|(hex, _)| {
                                    u32::from_str_radix(hex, 16)
                                        .ok()
                                        .and_then(char::from_u32)
                                        .map(|c| (c, hex.len() + 2))
                                });
                            let Some((ch, consumed)) = parsed else {
                                return self.error_at(self.pos + j, &["unicode escape"]);
                            };
                            out.push(ch);
                            for _ in 0..consumed {
                                chars.next();
                            }
                        }
                        _ => return self.error_at(self.pos + j, &["escape sequence"]),
                    }
                }
                c => out.push(c),
            }
        }
        self.pos = self.src.len();
        let _ = start;
        self.error(&["closing `\"`"])
    }

    fn number(&mut self) -> Result<Value> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        if bytes.get(i) == Some(&b'-') {
            i += 1;
        }
        let digits_from = i;
        while bytes.get(i).is_some_and(u8::is_ascii_digit) {
            i += 1;
        }
        if i == digits_from {
            self.pos = i;
            return self.error(&["digit"]);
        }
        let mut float = false;
        if bytes.get(i) == Some(&b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
            float = true;
            i += 1;
            while bytes.get(i).is_some_and(u8::is_ascii_digit) {
                i += 1;
            }
        }
        if matches!(bytes.get(i), Some(b'e' | b'E')) {
            let mut j = i + 1;
            if matches!(bytes.get(j), Some(b'+' | b'-')) {
                j += 1;
            }
            if bytes.get(j).is_some_and(u8::is_ascii_digit) {
                float = true;
                while bytes.get(j).is_some_and(u8::is_ascii_digit) {
                    j += 1;
                }
                i = j;
            }
        }
        let text = &self.src[start..i];
        self.pos = i;
        if float {
            text.parse()
                .map(Value::Number)
                .or_else(|_| self.error_at(start, &["number"]))
        } else {
            text.parse()
                .map(Value::Integer)
                .or_else(|_| self.error_at(start, &["64-bit integer"]))
        }
    }
}

const VALUE_START: &[&str] = &["string", "number", "`True`", "`False`", "variable", "`[`", "`<STR>`"];

fn as_var(id: &str) -> Option<VarId> {
    id.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intent_call() {
        let cmd = parse_command(r#"x0 = book_hotel_room(city="Paris")"#).unwrap();
        assert_eq!(
            cmd,
            Command::IntentCall {
                var: VarId(0),
                intent: "book_hotel_room".into(),
                args: vec![("city".into(), Value::text("Paris"))],
            }
        );
    }

    #[test]
    fn attr_assign() {
        let cmd = parse_command(r#"x0.check_in_date = "5th of March""#).unwrap();
        assert_eq!(
            cmd,
            Command::AttrAssign {
                var: VarId(0),
                slot: "check_in_date".into(),
                value: Value::text("5th of March"),
            }
        );
    }

    #[test]
    fn malformed_line_reports_offset() {
        match parse_command("x0 = = bad(") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn whitespace_between_tokens_is_ignored() {
        let a = parse_command("x3=set_alarm( time = \"7am\" ,label=x1.label )").unwrap();
        let b = parse_command("x3 = set_alarm(time=\"7am\", label=x1.label)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn values_of_every_kind() {
        let cmd =
            parse_command(r#"say(a=1, b=-2.5, c=True, d=False, e=x2, f=x2.time, g=[1, "two"], h=<STR>)"#)
                .unwrap();
        let Command::Say { args } = cmd else { panic!() };
        let values: Vec<_> = args.into_iter().map(|(_, v)| v).collect();
        assert_eq!(
            values,
            vec![
                Value::Integer(1),
                Value::Number(-2.5),
                Value::Boolean(true),
                Value::Boolean(false),
                Value::VarRef(VarId(2)),
                Value::AttrRef(VarId(2), "time".into()),
                Value::List(vec![Value::Integer(1), Value::text("two")]),
                Value::Placeholder,
            ]
        );
    }

    #[test]
    fn confirm_and_empty_calls() {
        assert_eq!(parse_command("confirm(x4)").unwrap(), Command::Confirm { var: VarId(4) });
        assert_eq!(parse_command("say()").unwrap(), Command::Say { args: vec![] });
        assert!(matches!(
            parse_command("x0 = find_alarms()").unwrap(),
            Command::IntentCall { ref args, .. } if args.is_empty()
        ));
    }

    #[test]
    fn rejects_positional_and_nested_and_duplicates() {
        for bad in [
            r#"x0 = f("a")"#,
            r#"x0 = f(a=g(b=1))"#,
            r#"x0 = f(a=1, a=2)"#,
            r#"confirm(y0)"#,
            r#"x0.slot = bare"#,
            r#"x0 = f(a="unterminated)"#,
            r#"x0 = f(a=1) trailing"#,
            "",
        ] {
            assert!(
                matches!(parse_command(bad), Err(Error::Syntax { .. })),
                "{bad} should not parse"
            );
        }
    }

    #[test]
    fn syntax_offsets_stay_in_bounds() {
        for bad in ["x0 = f(a=\"abc", "x0.", "say(", "x0 = f(a=1,", "\"é", "x0 = f(a=\"\\u{zz}\")"] {
            match parse_command(bad) {
                Err(Error::Syntax { offset, .. }) => assert!(offset <= bad.len(), "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn escapes_decode() {
        assert_eq!(
            parse_value(r#""a\"b\\c\nd\u{1}""#).unwrap(),
            Value::text("a\"b\\c\nd\u{1}")
        );
    }

    #[test]
    fn block_offsets_are_absolute() {
        let text = "confirm(x0)\nx0 = = bad(";
        match parse_commands(text) {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 12 + 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn integers_and_floats_are_distinct() {
        assert_eq!(parse_value("3").unwrap(), Value::Integer(3));
        assert_eq!(parse_value("3.0").unwrap(), Value::Number(3.0));
        assert_eq!(parse_value("1e3").unwrap(), Value::Number(1000.0));
        assert!(parse_value("99999999999999999999").is_err());
    }
}
